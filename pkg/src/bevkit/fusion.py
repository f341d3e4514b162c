"""Fusing per-modality BEV maps: averaging, concatenation, and channel
normalized weights (a learnable per-channel softmax between the modalities).

With both inputs present, CNW fuses F_cam * w + F_lidar * (1-w) with w the
per-channel two-way softmax of the raw weight vectors; equal raw weights make
it exact averaging. With one input present the normalized weight collapses to
one and fusion is the identity, bit for bit. Concatenation zero-fills the
missing modality's block instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor


class FusionWeights:
    """Raw (unnormalized) per-modality channel weight vectors, length N.

    Initialized to zero so training starts at exact average fusion.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.a_cam = Parameter("fusion.a_cam", np.zeros(channels))
        self.a_lidar = Parameter("fusion.a_lidar", np.zeros(channels))

    def parameters(self) -> List[Parameter]:
        return [self.a_cam, self.a_lidar]


@dataclass(frozen=True)
class ModalityMask:
    use_cam: bool
    use_lidar: bool

    def validate(self):
        if not (self.use_cam or self.use_lidar):
            raise ContractError("modality mask drops every sensor")
        return self

    @property
    def label(self) -> str:
        if self.use_cam and self.use_lidar:
            return "both"
        return "camera" if self.use_cam else "lidar"


@dataclass(frozen=True)
class MDConfig:
    """Modality-dropout probabilities: drop one modality with p_md; if so keep
    LiDAR with p_l (cameras with 1 - p_l)."""

    p_md: float = 0.5
    p_l: float = 0.5

    def validate(self):
        if not (0.0 <= self.p_md <= 1.0 and 0.0 <= self.p_l <= 1.0):
            raise ContractError(f"probabilities out of range: p_md={self.p_md}, p_l={self.p_l}")
        return self


def sample_modality_mask(cfg: MDConfig, rng: np.random.Generator) -> ModalityMask:
    """Both with prob 1-p_md; lidar-only with p_md*p_l; cam-only otherwise."""
    cfg.validate()
    u, v = rng.random(), rng.random()  # always two draws, branch-independent
    if u >= cfg.p_md:
        return ModalityMask(True, True)
    if v < cfg.p_l:
        return ModalityMask(False, True)
    return ModalityMask(True, False)


def normalize_weights(w: FusionWeights, mask: ModalityMask):
    """Per-channel softmax over the available modalities.

    Returns (a_cam_bar, a_lidar_bar) as Tensors; an absent modality gets the
    all-zeros vector, a lone modality the all-ones vector.
    """
    mask.validate()
    n = w.channels
    if mask.use_cam and mask.use_lidar:
        stacked = T.concat_lastaxis([
            T.reshape(w.a_cam.tensor, (n, 1)),
            T.reshape(w.a_lidar.tensor, (n, 1)),
        ])
        soft = T.softmax_lastaxis(stacked)
        cam_col, lidar_col = T.split_lastaxis(soft, [1, 1])
        return T.reshape(cam_col, (n,)), T.reshape(lidar_col, (n,))
    if mask.use_cam:
        return Tensor(np.ones(n)), Tensor(np.zeros(n))
    return Tensor(np.zeros(n)), Tensor(np.ones(n))


def fuse_cnw(cam: Optional[Tensor], lidar: Optional[Tensor], w: FusionWeights) -> Tensor:
    """Channel-normalized-weight fusion of [H,W,N] maps (either may be None)."""
    _check_pair(cam, lidar, same_channels=True)
    if cam is None:
        return lidar
    if lidar is None:
        return cam
    mask = ModalityMask(True, True)
    a_cam, a_lidar = normalize_weights(w, mask)
    return T.add(T.mul(cam, a_cam), T.mul(lidar, a_lidar))


def fuse_avg(cam: Optional[Tensor], lidar: Optional[Tensor]) -> Tensor:
    """Mean over the available maps; identity for a single input."""
    _check_pair(cam, lidar, same_channels=True)
    if cam is None:
        return lidar
    if lidar is None:
        return cam
    return T.mul(T.add(cam, lidar), Tensor(0.5))


def fuse_concat(cam: Optional[Tensor], lidar: Optional[Tensor]) -> Tensor:
    """[cam || lidar] along channels; a missing modality's block is zeros."""
    _check_pair(cam, lidar, same_channels=False)
    present = cam if cam is not None else lidar
    if cam is None:
        cam = Tensor(np.zeros(present.shape))
    if lidar is None:
        lidar = Tensor(np.zeros(present.shape))
    if cam.shape != lidar.shape:
        raise ShapeError(f"fuse_concat: block shapes differ: {cam.shape} vs {lidar.shape}")
    return T.concat_lastaxis([cam, lidar])


def fuse(mode: str, cam: Optional[Tensor], lidar: Optional[Tensor],
         w: Optional[FusionWeights]) -> Tensor:
    if mode == "cnw":
        return fuse_cnw(cam, lidar, w)
    if mode == "avg":
        return fuse_avg(cam, lidar)
    if mode == "concat":
        return fuse_concat(cam, lidar)
    raise ContractError(f"unknown fusion mode {mode!r}")


def _check_pair(cam, lidar, same_channels: bool):
    if cam is None and lidar is None:
        raise ContractError("fusion needs at least one modality")
    if cam is not None and lidar is not None and same_channels and cam.shape != lidar.shape:
        raise ShapeError(f"fusion inputs disagree: {cam.shape} vs {lidar.shape}")
