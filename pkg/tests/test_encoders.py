"""Uniform BEV encoder tests: camera/LiDAR equivalence, query sharing, shapes."""

import numpy as np
import pytest

import bevkit.tensor as T
from bevkit.encoders import (
    BEVQuerySet,
    encode_camera_bev,
    encode_lidar_bev,
    make_encoder_layers,
)
from bevkit.errors import ContractError
from bevkit.geometry import AffineBEVProjector, BEVGridSpec, make_camera
from bevkit.optim import Adam
from bevkit.tensor import Tensor, backward

from helpers import check_grads


def small_spec(h=4, w=4, d=2):
    return BEVGridSpec(h=h, w=w, d=d, extent=(-4, 4, -4, 4), z_range=(-0.5, 1.5))


def make_setup(seed=0, channels=4, mode="shared", n_layers=2, h=4, w=4, d=2):
    rng = np.random.default_rng(seed)
    spec = small_spec(h, w, d)
    queries = BEVQuerySet(spec, channels, mode, rng)
    layers = make_encoder_layers("enc", n_layers, heads=2, points=2,
                                 channels=channels, value_dim=channels, rng=rng)
    return rng, spec, queries, layers


class TestUniformity:
    def test_camera_path_with_affine_projector_matches_lidar_bitexact(self):
        rng, spec, queries, layers = make_setup(seed=1)
        feat = Tensor(rng.standard_normal((spec.h, spec.w, 4)))
        via_camera = encode_camera_bev(queries, [AffineBEVProjector((spec.h, spec.w))],
                                       [feat], layers)
        via_lidar = encode_lidar_bev(queries, feat, layers)
        assert np.array_equal(via_camera.features.data, via_lidar.features.data)

    def test_output_shapes(self):
        rng, spec, queries, layers = make_setup(seed=2)
        cam = make_camera([0, 0, 1.6], 0.0, 0.087, fx=3, fy=3, image_h=6, image_w=8)
        cam_feat = Tensor(rng.standard_normal((6, 8, 4)))
        lidar_feat = Tensor(rng.standard_normal((7, 9, 4)))  # resolution differs from grid
        out_c = encode_camera_bev(queries, [cam], [cam_feat], layers)
        out_l = encode_lidar_bev(queries, lidar_feat, layers)
        assert out_c.features.shape == (spec.h, spec.w, 4)
        assert out_l.features.shape == (spec.h, spec.w, 4)

    def test_no_views_is_contract_error(self):
        _, _, queries, layers = make_setup(seed=3)
        with pytest.raises(ContractError):
            encode_camera_bev(queries, [], [], layers)


class TestCrossAttentionStructure:
    def test_lidar_identity_projection_reads_own_cell(self):
        # degenerate attention: zero offsets, identity value/out, D=1 and a
        # grid-matched map -> the first layer's cross term is exactly the map
        rng, spec, queries, layers = make_setup(seed=4, n_layers=1, d=1)
        lp = layers[0]
        lp.cross_attn.value_w[0].tensor.data[:] = np.eye(4)[:, :2]
        lp.cross_attn.value_w[1].tensor.data[:] = np.eye(4)[:, 2:]
        lp.cross_attn.out_w.tensor.data[:] = np.eye(4)
        feat = rng.standard_normal((spec.h, spec.w, 4))
        _, inters = encode_lidar_bev(queries, Tensor(feat), layers, return_intermediates=True)
        cross = inters[0]["cross"].data
        assert np.allclose(cross, feat.reshape(-1, 4), atol=1e-12)

    def test_two_views_double_one_view(self):
        # a cell visible in two identical views gets exactly twice the cross term
        rng, spec, queries, layers = make_setup(seed=5, n_layers=1)
        proj = AffineBEVProjector((spec.h, spec.w))
        feat = Tensor(rng.standard_normal((spec.h, spec.w, 4)))
        _, one = encode_camera_bev(queries, [proj], [feat], layers, return_intermediates=True)
        _, two = encode_camera_bev(queries, [proj, proj], [feat, feat], layers,
                                   return_intermediates=True)
        assert np.array_equal(two[0]["cross"].data, 2.0 * one[0]["cross"].data)

    def test_fully_invisible_cell_contributes_zero(self):
        rng, spec, queries, layers = make_setup(seed=6, n_layers=1)
        # camera looking away from the whole grid -> nothing visible
        cam = make_camera([100.0, 0, 1.6], 0.0, 0.0, fx=3, fy=3, image_h=6, image_w=8)
        feat = Tensor(rng.standard_normal((6, 8, 4)))
        _, inters = encode_camera_bev(queries, [cam], [feat], layers, return_intermediates=True)
        assert np.array_equal(inters[0]["cross"].data, np.zeros((spec.h * spec.w, 4)))

    def test_normalize_by_hits_default_off(self):
        rng, spec, queries, layers = make_setup(seed=7, n_layers=1)
        proj = AffineBEVProjector((spec.h, spec.w))
        feat = Tensor(rng.standard_normal((spec.h, spec.w, 4)))
        _, raw = encode_camera_bev(queries, [proj, proj], [feat, feat], layers,
                                   return_intermediates=True)
        _, nrm = encode_camera_bev(queries, [proj, proj], [feat, feat], layers,
                                   normalize_by_hits=True, return_intermediates=True)
        # D=2 levels x 2 views = 4 hits per cell
        assert np.allclose(nrm[0]["cross"].data, raw[0]["cross"].data / 4.0)


class TestQuerySharing:
    def test_shared_mode_same_parameter_object(self):
        _, _, queries, _ = make_setup(mode="shared")
        assert queries.query_param("camera") is queries.query_param("lidar")
        assert len(queries.parameters()) == 1

    def test_separate_mode_disjoint(self):
        _, _, queries, _ = make_setup(mode="separate")
        assert queries.query_param("camera") is not queries.query_param("lidar")
        assert len(queries.parameters()) == 2

    def test_camera_step_changes_lidar_tokens_in_shared_mode(self):
        rng, spec, queries, layers = make_setup(seed=8, mode="shared", n_layers=1)
        cam = make_camera([0, 0, 1.6], 0.0, 0.087, fx=3, fy=3, image_h=6, image_w=8)
        feat = Tensor(rng.standard_normal((6, 8, 4)))
        before = queries.tokens("lidar").data.copy()
        out = encode_camera_bev(queries, [cam], [feat], layers)
        backward(T.tsum(T.sigmoid(out.features)))
        Adam(queries.parameters(), lr=1e-2).step()
        after = queries.tokens("lidar").data
        assert not np.array_equal(before, after)

    def test_separate_mode_lidar_tokens_untouched_by_camera_loss(self):
        rng, spec, queries, layers = make_setup(seed=9, mode="separate", n_layers=1)
        cam = make_camera([0, 0, 1.6], 0.0, 0.087, fx=3, fy=3, image_h=6, image_w=8)
        feat = Tensor(rng.standard_normal((6, 8, 4)))
        before = queries.tokens("lidar").data.copy()
        out = encode_camera_bev(queries, [cam], [feat], layers)
        backward(T.tsum(T.sigmoid(out.features)))
        Adam(queries.parameters(), lr=1e-2).step()
        assert np.array_equal(before, queries.tokens("lidar").data)


def test_fd_gradient_through_lidar_encoder():
    rng, spec, queries, layers = make_setup(seed=10, n_layers=1, h=3, w=3, d=1)
    lp = layers[0]
    for attn in (lp.self_attn, lp.cross_attn):
        attn.offset_w.tensor.data[:] = rng.uniform(0.05, 0.25, attn.offset_w.tensor.shape)
        attn.offset_b.tensor.data[:] = rng.uniform(0.05, 0.25, attn.offset_b.tensor.shape)
        attn.weight_w.tensor.data[:] = rng.uniform(-0.5, 0.5, attn.weight_w.tensor.shape)

    feat0 = rng.standard_normal((3, 3, 4))
    qparam = queries.query_param("lidar")
    leaves = [feat0, qparam.tensor.data.copy()] + [p.tensor.data.copy() for p in lp.parameters()]

    def build(ts):
        feat = ts[0]
        qparam.tensor = ts[1]
        for prm, t in zip(lp.parameters(), ts[2:]):
            prm.tensor = t
        out = encode_lidar_bev(queries, feat, layers)
        return T.tsum(T.sigmoid(out.features))

    check_grads(build, leaves)
