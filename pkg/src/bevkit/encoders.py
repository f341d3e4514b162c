"""Per-modality BEV feature construction from shared queries.

Both sensors run the identical encoder path; the only thing that differs is
the projection used to turn the 3D reference grid into per-source sampling
coordinates. The camera path takes V pinhole views (each contributing D
pillar levels of references); the LiDAR path is the same machinery with a
single affine-projected source. Cross-attention sums over every
(source, level) pair where the reference is visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .attention import EncoderLayerParams, encoder_layer
from .errors import ContractError, ShapeError
from .geometry import AffineBEVProjector, BEVGridSpec, ReferenceGrid, build_reference_grid
from .tensor import Parameter, Tensor


class BEVQuerySet:
    """Learnable BEV queries plus their reference grid.

    mode="shared" exposes one parameter object to both encoders (the coupling
    that aligns the two feature spaces); mode="separate" gives each modality
    its own queries.
    """

    def __init__(self, spec: BEVGridSpec, channels: int, mode: str,
                 rng: np.random.Generator):
        if mode not in ("shared", "separate"):
            raise ContractError(f"query mode must be shared|separate, got {mode!r}")
        self.spec = spec.validate()
        self.channels = channels
        self.mode = mode
        self.refs = build_reference_grid(spec)
        shape = (spec.h, spec.w, channels)
        scale = 1.0 / np.sqrt(channels)
        if mode == "shared":
            q = Parameter("queries.shared", rng.uniform(-scale, scale, shape))
            self._by_modality = {"camera": q, "lidar": q}
        else:
            self._by_modality = {
                "camera": Parameter("queries.camera", rng.uniform(-scale, scale, shape)),
                "lidar": Parameter("queries.lidar", rng.uniform(-scale, scale, shape)),
            }

    def query_param(self, modality: str) -> Parameter:
        return self._by_modality[modality]

    def tokens(self, modality: str) -> Tensor:
        spec = self.spec
        return T.reshape(self._by_modality[modality].tensor, (spec.h * spec.w, self.channels))

    def parameters(self) -> List[Parameter]:
        seen = {}
        for p in self._by_modality.values():
            seen[p.name] = p
        return [seen[k] for k in sorted(seen)]

    def self_refs(self) -> np.ndarray:
        h, w = self.spec.h, self.spec.w
        r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([r.reshape(-1), c.reshape(-1)], axis=1).astype(np.float64)


@dataclass
class ModalityBEV:
    """Encoded BEV feature map of one modality, [H,W,N]."""

    modality: str
    features: Tensor


def build_sources(refs: ReferenceGrid, projectors: Sequence, feats: Sequence[Tensor]):
    """Flatten (view, pillar level) pairs into encoder cross-attention sources.

    Order is views outer, z levels inner, which fixes the float summation
    order for reproducibility. A projector advertising z_invariant collapses
    its D identical levels into one source with multiplicity D.
    """
    if len(projectors) != len(feats):
        raise ContractError(f"{len(projectors)} projectors vs {len(feats)} feature maps")
    d, h, w, _ = refs.points.shape
    t = h * w
    sources = []
    for proj, feat in zip(projectors, feats):
        uv, vis = proj.project(refs)
        rc = np.ascontiguousarray(uv[..., ::-1])  # (u,v) -> (row,col)
        if getattr(proj, "z_invariant", False):
            sources.append((feat, rc[0].reshape(t, 2), vis[0].reshape(t), d))
        else:
            for z in range(d):
                sources.append((feat, rc[z].reshape(t, 2), vis[z].reshape(t), 1))
    return sources


def encode_bev_features(tokens: Tensor, queries: BEVQuerySet, sources,
                        layers: Sequence[EncoderLayerParams],
                        normalize_by_hits: bool = False,
                        return_intermediates: bool = False):
    spec = queries.spec
    self_refs = queries.self_refs()
    x = tokens
    inters = []
    for lp in layers:
        if return_intermediates:
            x, parts = encoder_layer(x, (spec.h, spec.w), self_refs, sources, lp,
                                     normalize_by_hits=normalize_by_hits, return_parts=True)
            inters.append(parts)
        else:
            x = encoder_layer(x, (spec.h, spec.w), self_refs, sources, lp,
                              normalize_by_hits=normalize_by_hits)
    if return_intermediates:
        return x, inters
    return x


def encode_camera_bev(queries: BEVQuerySet, views: Sequence, feats: Sequence[Tensor],
                      layers: Sequence[EncoderLayerParams],
                      normalize_by_hits: bool = False,
                      return_intermediates: bool = False):
    """Camera-branch BEV map: cross-attention over all V views x D levels.

    `views` are projection providers (CameraModel or anything with a
    .project(refs) -> (uv, visible) method); one feature map per view.
    """
    if len(views) == 0:
        raise ContractError("encode_camera_bev: need at least one view")
    widths = {f.shape[-1] for f in feats}
    if len(widths) != 1:
        raise ShapeError(f"camera feature maps disagree on channels: {sorted(widths)}")
    sources = build_sources(queries.refs, views, feats)
    tokens = queries.tokens("camera")
    out = encode_bev_features(tokens, queries, sources, layers,
                              normalize_by_hits=normalize_by_hits,
                              return_intermediates=return_intermediates)
    if return_intermediates:
        final, inters = out
        spec = queries.spec
        return ModalityBEV("camera", T.reshape(final, (spec.h, spec.w, queries.channels))), inters
    spec = queries.spec
    return ModalityBEV("camera", T.reshape(out, (spec.h, spec.w, queries.channels)))


def encode_lidar_bev(queries: BEVQuerySet, feat_l: Tensor,
                     layers: Sequence[EncoderLayerParams],
                     normalize_by_hits: bool = False,
                     return_intermediates: bool = False):
    """LiDAR-branch BEV map: identical machinery, single affine-projected source."""
    proj = AffineBEVProjector((feat_l.shape[0], feat_l.shape[1]))
    sources = build_sources(queries.refs, [proj], [feat_l])
    tokens = queries.tokens("lidar")
    out = encode_bev_features(tokens, queries, sources, layers,
                              normalize_by_hits=normalize_by_hits,
                              return_intermediates=return_intermediates)
    spec = queries.spec
    if return_intermediates:
        final, inters = out
        return ModalityBEV("lidar", T.reshape(final, (spec.h, spec.w, queries.channels))), inters
    return ModalityBEV("lidar", T.reshape(out, (spec.h, spec.w, queries.channels)))


def make_encoder_layers(prefix: str, n_layers: int, heads: int, points: int,
                        channels: int, value_dim: int, rng) -> List[EncoderLayerParams]:
    return [EncoderLayerParams(f"{prefix}.layer{i}", heads, points, channels, value_dim, rng)
            for i in range(n_layers)]
