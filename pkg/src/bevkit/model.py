"""Full detector: backbones -> uniform BEV encoders -> fusion -> set decoder.

In concat mode each encoder runs at half width so the fused map (and thus the
decoder) keeps the same channel count as avg/cnw mode. Dropping a modality
skips its whole branch; that is numerically identical to computing it and
discarding the features, since nothing downstream reads them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .detection import BoxPrediction, DecoderParams, decode, decode_raw, set_loss
from .encoders import BEVQuerySet, encode_camera_bev, encode_lidar_bev, make_encoder_layers
from .errors import ConfigError
from .fusion import FusionWeights, ModalityMask, fuse
from .geometry import BEVGridSpec, CameraModel
from .synthscene import CameraBackbone, LidarBackbone, RenderedSample
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    heads: int = 2
    points: int = 4
    enc_layers: int = 3
    dec_layers: int = 2
    n_obj: int = 20
    n_classes: int = 4  # object classes + background
    fusion: str = "cnw"  # cnw | avg | concat
    query_mode: str = "shared"  # shared | separate
    normalize_by_hits: bool = False
    lambda_cls: float = 1.0
    lambda_box: float = 2.0
    background_weight: float = 0.1
    cam_hidden: Tuple[int, int] = (8, 16)
    lidar_hidden: Tuple[int, int] = (12, 16)
    feature_downsample: int = 2  # camera backbone spatial reduction

    def validate(self):
        if self.fusion not in ("cnw", "avg", "concat"):
            raise ConfigError(f"fusion must be cnw|avg|concat, got {self.fusion!r}")
        if self.query_mode not in ("shared", "separate"):
            raise ConfigError(f"query_mode must be shared|separate, got {self.query_mode!r}")
        n_enc = self.channels // 2 if self.fusion == "concat" else self.channels
        if self.fusion == "concat" and self.channels % 2:
            raise ConfigError(f"concat fusion needs even channels, got {self.channels}")
        if n_enc % self.heads:
            raise ConfigError(
                f"encoder width {n_enc} not divisible by heads {self.heads}"
            )
        if self.n_obj < 1 or self.n_classes < 2:
            raise ConfigError(f"bad head sizes: n_obj={self.n_obj}, n_classes={self.n_classes}")
        return self

    @property
    def encoder_channels(self) -> int:
        return self.channels // 2 if self.fusion == "concat" else self.channels


class _FrozenProjector:
    """Precomputed (uv, visible) for a fixed camera and reference grid."""

    def __init__(self, uv, visible):
        self._uv = uv
        self._visible = visible

    def project(self, refs):
        return self._uv, self._visible


class Detector:
    def __init__(self, cfg: ModelConfig, spec: BEVGridSpec, rng: np.random.Generator):
        self.cfg = cfg.validate()
        self.spec = spec.validate()
        n_enc = cfg.encoder_channels
        self.cam_backbone = CameraBackbone(n_enc, rng, hidden=cfg.cam_hidden)
        self.lidar_backbone = LidarBackbone(n_enc, rng, hidden=cfg.lidar_hidden)
        self.queries = BEVQuerySet(spec, n_enc, cfg.query_mode, rng)
        self.cam_layers = make_encoder_layers("encoder.camera", cfg.enc_layers, cfg.heads,
                                              cfg.points, n_enc, n_enc, rng)
        self.lidar_layers = make_encoder_layers("encoder.lidar", cfg.enc_layers, cfg.heads,
                                                cfg.points, n_enc, n_enc, rng)
        self.fusion_weights = FusionWeights(n_enc) if cfg.fusion == "cnw" else None
        self.decoder = DecoderParams(cfg.n_obj, cfg.channels, cfg.n_classes,
                                     cfg.dec_layers, rng)
        self._bound_cams: Optional[list] = None
        self._projectors: List[_FrozenProjector] = []

    # -- parameters and state ------------------------------------------------

    def parameters(self) -> List[Parameter]:
        ps: List[Parameter] = []
        ps += self.cam_backbone.parameters()
        ps += self.lidar_backbone.parameters()
        ps += self.queries.parameters()
        for layer in self.cam_layers + self.lidar_layers:
            ps += layer.parameters()
        if self.fusion_weights is not None:
            ps += self.fusion_weights.parameters()
        ps += self.decoder.parameters()
        return ps

    def param_arrays(self) -> Dict[str, np.ndarray]:
        return {p.name: p.tensor.data for p in self.parameters()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {p.name}")
            if tuple(arrays[p.name].shape) != p.tensor.shape:
                raise ConfigError(
                    f"checkpoint shape {arrays[p.name].shape} != {p.tensor.shape} for {p.name}"
                )
            p.tensor.data[:] = arrays[p.name]

    # -- forward -------------------------------------------------------------

    def _bind(self, cams: List[CameraModel]):
        if self._bound_cams is cams:
            return
        self._projectors = []
        for cam in cams:
            feat_cam = cam.scaled(self.cfg.feature_downsample)
            uv, vis = feat_cam.project(self.queries.refs)
            self._projectors.append(_FrozenProjector(uv, vis))
        self._bound_cams = cams

    def encode(self, sample: RenderedSample, mask: ModalityMask):
        """Per-modality BEV features under the given availability mask."""
        mask.validate()
        cam_bev = lidar_bev = None
        if mask.use_cam:
            self._bind(sample.cams)
            feats = self.cam_backbone.forward(sample.camera_images)
            cam_bev = encode_camera_bev(self.queries, self._projectors, feats,
                                        self.cam_layers,
                                        normalize_by_hits=self.cfg.normalize_by_hits)
        if mask.use_lidar:
            feat_l = self.lidar_backbone.forward(sample.lidar_grid)
            lidar_bev = encode_lidar_bev(self.queries, feat_l, self.lidar_layers,
                                         normalize_by_hits=self.cfg.normalize_by_hits)
        return cam_bev, lidar_bev

    def fused_map(self, sample: RenderedSample, mask: ModalityMask) -> Tensor:
        cam_bev, lidar_bev = self.encode(sample, mask)
        return fuse(self.cfg.fusion,
                    cam_bev.features if cam_bev is not None else None,
                    lidar_bev.features if lidar_bev is not None else None,
                    self.fusion_weights)

    def loss(self, sample: RenderedSample, mask: ModalityMask) -> Tensor:
        fused = self.fused_map(sample, mask)
        tokens = T.reshape(fused, (self.spec.h * self.spec.w, self.cfg.channels))
        logits, box_raw = decode_raw(tokens, self.decoder)
        return set_loss(logits, box_raw, sample.gts, self.spec,
                        lambda_cls=self.cfg.lambda_cls, lambda_box=self.cfg.lambda_box,
                        background_weight=self.cfg.background_weight)

    def predict(self, sample: RenderedSample, mask: ModalityMask) -> List[BoxPrediction]:
        with T.no_grad():
            fused = self.fused_map(sample, mask)
            return decode(fused, self.decoder, self.spec)
