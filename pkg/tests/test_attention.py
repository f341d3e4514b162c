"""Deformable attention vs the naive loop oracle, plus encoder layer tests."""

import numpy as np
import pytest

import bevkit.tensor as T
from bevkit.attention import DeformAttnParams, EncoderLayerParams, deform_attn, deform_attn_multi, encoder_layer
from bevkit.errors import ShapeError
from bevkit.tensor import Tensor, backward

from helpers import check_grads
from naive_reference import deform_attn_naive


def make_params(rng, heads=2, points=2, channels=4, value_dim=4, randomize=True):
    p = DeformAttnParams("t", heads, points, channels, value_dim, rng)
    if randomize:
        # exercise nontrivial offsets and weights
        p.offset_w.tensor.data[:] = rng.uniform(-0.5, 0.5, p.offset_w.tensor.shape)
        p.offset_b.tensor.data[:] = rng.uniform(-0.5, 0.5, p.offset_b.tensor.shape)
        p.weight_w.tensor.data[:] = rng.uniform(-1, 1, p.weight_w.tensor.shape)
        p.weight_b.tensor.data[:] = rng.uniform(-1, 1, p.weight_b.tensor.shape)
    return p


def run_naive(queries, refs, feat, p, valid=None):
    return deform_attn_naive(
        queries, refs, feat,
        p.offset_w.tensor.data, p.offset_b.tensor.data,
        p.weight_w.tensor.data, p.weight_b.tensor.data,
        [w.tensor.data for w in p.value_w], p.out_w.tensor.data,
        valid=valid,
    )


class TestDeformAttn:
    def test_degenerate_is_plain_sampling(self):
        rng = np.random.default_rng(0)
        p = DeformAttnParams("t", heads=1, points=1, channels=3, value_dim=3, rng=rng)
        p.value_w[0].tensor.data[:] = np.eye(3)
        p.out_w.tensor.data[:] = np.eye(3)
        feat = Tensor(rng.standard_normal((5, 5, 3)))
        refs = rng.uniform(0, 4, (7, 2))
        out = deform_attn(Tensor(rng.standard_normal((7, 3))), refs, feat, p)
        expected = T.bilinear_sample(feat, Tensor(refs)).data
        assert np.array_equal(out.data, expected)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed + 40)
        p = make_params(rng)
        queries = rng.standard_normal((3, 4))
        refs = rng.uniform(-1, 5, (3, 2))
        feat = rng.standard_normal((4, 4, 4))
        out = deform_attn(Tensor(queries), refs, Tensor(feat), p)
        ref = run_naive(queries, refs, feat, p)
        assert np.max(np.abs(out.data - ref)) < 1e-10

    def test_all_invalid_gives_zero(self):
        rng = np.random.default_rng(1)
        p = make_params(rng)
        out = deform_attn(Tensor(rng.standard_normal((3, 4))), rng.uniform(0, 3, (3, 2)),
                          Tensor(rng.standard_normal((4, 4, 4))), p,
                          valid=np.zeros(3, dtype=bool))
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_partial_valid_matches_naive(self):
        rng = np.random.default_rng(2)
        p = make_params(rng)
        queries = rng.standard_normal((5, 4))
        refs = rng.uniform(0, 3, (5, 2))
        feat = rng.standard_normal((4, 4, 4))
        valid = np.array([True, False, True, True, False])
        out = deform_attn(Tensor(queries), refs, Tensor(feat), p, valid=valid)
        assert np.max(np.abs(out.data - run_naive(queries, refs, feat, p, valid))) < 1e-10

    def test_head_weights_sum_to_one(self):
        rng = np.random.default_rng(3)
        p = make_params(rng)
        from bevkit.attention import _query_offsets_weights
        _, attn = _query_offsets_weights(Tensor(rng.standard_normal((6, 4))), p)
        assert np.all(attn.data > 0)
        assert np.all(np.abs(attn.data.sum(axis=-1) - 1.0) < 1e-6)

    def test_value_width_mismatch(self):
        rng = np.random.default_rng(4)
        p = make_params(rng)
        with pytest.raises(ShapeError):
            deform_attn(Tensor(rng.standard_normal((3, 4))), rng.uniform(0, 3, (3, 2)),
                        Tensor(rng.standard_normal((4, 4, 5))), p)

    def test_bad_ref_arity(self):
        rng = np.random.default_rng(5)
        p = make_params(rng)
        with pytest.raises(ShapeError):
            deform_attn(Tensor(rng.standard_normal((3, 4))), rng.uniform(0, 3, (3, 3)),
                        Tensor(rng.standard_normal((4, 4, 4))), p)

    @pytest.mark.parametrize("seed", range(6))
    def test_multi_equals_sum_of_singles(self, seed):
        rng = np.random.default_rng(seed + 60)
        p = make_params(rng)
        queries = Tensor(rng.standard_normal((4, 4)))
        sources = []
        singles = np.zeros((4, 4))
        for _ in range(3):
            feat = rng.standard_normal((5, 5, 4))
            refs = rng.uniform(-1, 5, (4, 2))
            valid = rng.random(4) > 0.3
            sources.append((Tensor(feat), refs, valid))
            singles += deform_attn(queries, refs, Tensor(feat), p, valid=valid).data
        multi = deform_attn_multi(queries, sources, p)
        assert np.max(np.abs(multi.data - singles)) < 1e-10

    def test_duplicated_source_doubles(self):
        rng = np.random.default_rng(7)
        p = make_params(rng)
        queries = Tensor(rng.standard_normal((4, 4)))
        feat = Tensor(rng.standard_normal((5, 5, 4)))
        refs = rng.uniform(0, 4, (4, 2))
        valid = np.ones(4, dtype=bool)
        one = deform_attn_multi(queries, [(feat, refs, valid)], p)
        two = deform_attn_multi(queries, [(feat, refs, valid)] * 2, p)
        assert np.array_equal(two.data, 2.0 * one.data)

    @pytest.mark.parametrize("seed", range(5))
    def test_fd_gradients(self, seed):
        rng = np.random.default_rng(seed + 80)
        p = make_params(rng, heads=2, points=2, channels=4, value_dim=4)
        feat0 = rng.standard_normal((4, 4, 4))
        queries0 = rng.standard_normal((3, 4)) * 0.3
        refs = rng.integers(0, 3, (3, 2)) + rng.uniform(0.25, 0.75, (3, 2))

        leaves = [queries0, feat0,
                  p.offset_w.tensor.data.copy(), p.weight_w.tensor.data.copy(),
                  p.value_w[0].tensor.data.copy(), p.out_w.tensor.data.copy()]

        def build(ts):
            q, f, ow, ww, vw0, outw = ts
            p.offset_w.tensor = ow
            p.weight_w.tensor = ww
            p.value_w[0].tensor = vw0
            p.out_w.tensor = outw
            p.offset_b.tensor = Tensor(p.offset_b.tensor.data)
            out = deform_attn(q, refs, f, p)
            return T.tsum(T.sigmoid(out))

        check_grads(build, leaves)


class TestEncoderLayer:
    def make_layer(self, rng, channels=4, value_dim=4):
        return EncoderLayerParams("layer", heads=2, points=2, channels=channels,
                                  value_dim=value_dim, rng=rng)

    def grid_refs(self, h, w):
        r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([r.reshape(-1), c.reshape(-1)], axis=1).astype(np.float64)

    def test_shape_preserved(self):
        rng = np.random.default_rng(10)
        lp = self.make_layer(rng)
        tokens = Tensor(rng.standard_normal((6, 4)))
        refs = self.grid_refs(2, 3)
        src = (Tensor(rng.standard_normal((4, 4, 4))), rng.uniform(0, 3, (6, 2)), np.ones(6, bool))
        out = encoder_layer(tokens, (2, 3), refs, [src], lp)
        assert out.shape == (6, 4)

    def test_residual_identity_path(self):
        # all attention and ffn output projections zero -> pure norm chain
        rng = np.random.default_rng(11)
        lp = self.make_layer(rng)
        lp.self_attn.out_w.tensor.data[:] = 0.0
        lp.cross_attn.out_w.tensor.data[:] = 0.0
        lp.ffn_w2.tensor.data[:] = 0.0
        tokens = rng.standard_normal((6, 4))
        refs = self.grid_refs(2, 3)
        src = (Tensor(rng.standard_normal((4, 4, 4))), rng.uniform(0, 3, (6, 2)), np.ones(6, bool))
        out = encoder_layer(Tensor(tokens), (2, 3), refs, [src], lp)

        def ln(x):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-5)

        assert np.allclose(out.data, ln(ln(ln(tokens))), atol=1e-12)

    def test_cross_term_doubles_with_duplicate_source(self):
        rng = np.random.default_rng(12)
        lp = self.make_layer(rng)
        tokens = Tensor(rng.standard_normal((6, 4)))
        refs = self.grid_refs(2, 3)
        feat = Tensor(rng.standard_normal((4, 4, 4)))
        cross_refs = rng.uniform(0, 3, (6, 2))
        valid = np.ones(6, bool)
        _, p1 = encoder_layer(tokens, (2, 3), refs, [(feat, cross_refs, valid)], lp,
                              return_parts=True)
        _, p2 = encoder_layer(tokens, (2, 3), refs, [(feat, cross_refs, valid)] * 2, lp,
                              return_parts=True)
        assert np.array_equal(p2["cross"].data, 2.0 * p1["cross"].data)

    def test_source_count_mismatch_raises(self):
        rng = np.random.default_rng(13)
        lp = self.make_layer(rng)
        tokens = Tensor(rng.standard_normal((6, 4)))
        with pytest.raises(Exception):
            encoder_layer(tokens, (2, 4), self.grid_refs(2, 3), [], lp)

    def test_normalize_by_hits_flag(self):
        rng = np.random.default_rng(14)
        lp = self.make_layer(rng)
        tokens = Tensor(rng.standard_normal((4, 4)))
        refs = self.grid_refs(2, 2)
        feat = Tensor(rng.standard_normal((4, 4, 4)))
        cross_refs = rng.uniform(0, 3, (4, 2))
        valid = np.ones(4, bool)
        _, raw = encoder_layer(tokens, (2, 2), refs, [(feat, cross_refs, valid)] * 2, lp,
                               return_parts=True)
        _, nrm = encoder_layer(tokens, (2, 2), refs, [(feat, cross_refs, valid)] * 2, lp,
                               normalize_by_hits=True, return_parts=True)
        assert np.allclose(nrm["cross"].data, raw["cross"].data / 2.0)

    def test_fd_through_full_layer(self):
        rng = np.random.default_rng(15)
        lp = self.make_layer(rng)
        # zero-initialized offsets sample exactly on bilinear kinks; nudge all
        # projections off zero so central differences are well defined
        for attn in (lp.self_attn, lp.cross_attn):
            attn.offset_w.tensor.data[:] = rng.uniform(0.05, 0.3, attn.offset_w.tensor.shape)
            attn.offset_b.tensor.data[:] = rng.uniform(0.05, 0.3, attn.offset_b.tensor.shape)
            attn.weight_w.tensor.data[:] = rng.uniform(-0.5, 0.5, attn.weight_w.tensor.shape)
            attn.weight_b.tensor.data[:] = rng.uniform(-0.5, 0.5, attn.weight_b.tensor.shape)
        tokens0 = rng.standard_normal((4, 4)) * 0.5
        feat0 = rng.standard_normal((3, 3, 4))
        refs = self.grid_refs(2, 2)
        cross_refs = rng.integers(0, 2, (4, 2)) + rng.uniform(0.25, 0.75, (4, 2))
        valid = np.ones(4, bool)

        names = []
        for prm in lp.parameters():
            names.append(prm)

        leaves = [tokens0, feat0] + [prm.tensor.data.copy() for prm in names]

        def build(ts):
            tokens, feat = ts[0], ts[1]
            for prm, t in zip(names, ts[2:]):
                prm.tensor = t
            out = encoder_layer(tokens, (2, 2), refs, [(feat, cross_refs, valid)], lp)
            return T.tsum(T.sigmoid(out))

        check_grads(build, leaves)
