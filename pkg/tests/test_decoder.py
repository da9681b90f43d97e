import math

import numpy as np
import pytest

from weaktr.decoder import (IGNORE, DecoderConfig, SegDecoder, clip_report, clipping_mask,
                            decode, gated_clip, global_lambda, gradient_patches, per_pixel_ce,
                            retained_pixels)
from weaktr.numerics import ShapeError, Tensor, check_gradient


def brute_force_mask(ce, s):
    """Loop-based reference for tile means, global mean and the max-threshold rule."""
    o = ce.shape[0]
    l = o // s
    lam = []
    for ti in range(l):
        for tj in range(l):
            vals = [ce[ti * s + a, tj * s + b] for a in range(s) for b in range(s)]
            lam.append(sum(vals) / len(vals))
    lg = sum(lam) / len(lam)
    out = np.zeros((l * l, s, s), np.uint8)
    for t in range(l * l):
        thr = max(lam[t], lg)
        ti, tj = divmod(t, l)
        for a in range(s):
            for b in range(s):
                out[t, a, b] = 1 if ce[ti * s + a, tj * s + b] <= thr else 0
    return out


class TestConfig:
    def test_patch_must_divide(self):
        with pytest.raises(ValueError):
            DecoderConfig(output_size=64, grad_patch_size=24)

    def test_tau_positive(self):
        with pytest.raises(ValueError):
            DecoderConfig(start_value=0.0)

    def test_tiles_per_side(self):
        assert DecoderConfig(output_size=64, grad_patch_size=16).tiles_per_side == 4


class TestDecode:
    cfg = DecoderConfig(num_classes=3, embed_dim=4, output_size=8, grad_patch_size=4)

    def test_identical_class_rows_are_centered(self):
        rng = np.random.default_rng(0)
        q = np.tile(rng.normal(size=(1, 4)), (3, 1))
        out = decode(q, rng.normal(size=(4, 4)), self.cfg).logits.data
        np.testing.assert_allclose(out, out[..., :1].repeat(3, axis=-1), rtol=1e-6)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-4)

    def test_single_patch_is_constant(self):
        rng = np.random.default_rng(1)
        out = decode(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), self.cfg).logits.data
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), rtol=1e-6)

    def test_matches_pipeline_oracle(self):
        rng = np.random.default_rng(2)
        q, t = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        tn = t / np.linalg.norm(t, axis=1, keepdims=True)
        s = tn @ qn.T / 2.0
        s = (s - s.mean(1, keepdims=True)) / np.sqrt(s.var(1, keepdims=True) + 1e-6)
        grid = s.reshape(2, 2, 3)
        r = np.linspace(0, 1, 8)
        ref = np.zeros((8, 8, 3))
        for i, y in enumerate(r):
            for j, x in enumerate(r):
                ref[i, j] = ((1 - y) * (1 - x) * grid[0, 0] + (1 - y) * x * grid[0, 1]
                             + y * (1 - x) * grid[1, 0] + y * x * grid[1, 1])
        np.testing.assert_allclose(decode(q, t, self.cfg).logits.data, ref, rtol=1e-4, atol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            decode(np.zeros((3, 4)), np.zeros((4, 5)), self.cfg)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            decode(np.ones((3, 4)), np.ones((3, 4)), self.cfg)

    def test_module_batched(self):
        dec = SegDecoder(DecoderConfig(num_classes=3, embed_dim=8, output_size=8, grad_patch_size=4))
        out = dec(np.random.default_rng(3).normal(size=(2, 4, 8)))
        assert out.logits.shape == (2, 8, 8, 3)


class TestPerPixelCE:
    def test_uniform_logits(self):
        ce = per_pixel_ce(np.zeros((2, 2, 2)), np.array([[0, 1], [1, IGNORE]])).data
        np.testing.assert_allclose(ce[np.array([[1, 1], [1, 0]], bool)], math.log(2), rtol=1e-6)
        assert ce[1, 1] == 0

    def test_saturation(self):
        ce = per_pixel_ce(np.array([[[100.0, 0.0]]]), np.array([[0]])).data
        assert ce.item() < 1e-6

    def test_softplus_oracle(self):
        ce = per_pixel_ce(np.array([[[1.0, 0.0], [0.0, 1.0]]]), np.array([[0, 0]])).data
        np.testing.assert_allclose(ce[0], [math.log1p(math.exp(-1)), math.log1p(math.exp(1))], rtol=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            per_pixel_ce(np.zeros((1, 1, 2)), np.array([[2]]))

    def test_ignored_pixels_get_no_gradient(self):
        from weaktr.numerics import Parameter
        p = Parameter(np.random.default_rng(0).normal(size=(2, 2, 3)), "logits")
        seeds = np.array([[0, IGNORE], [2, 1]])
        per_pixel_ce(p, seeds).sum().backward()
        assert not p.grad[0, 1].any()
        assert p.grad[0, 0].any()

    def test_gradient(self):
        from weaktr.numerics import Parameter
        p = Parameter(np.random.default_rng(1).normal(size=(2, 2, 3)), "logits")
        seeds = np.array([[0, 1], [2, IGNORE]])
        assert check_gradient(lambda: per_pixel_ce(p, seeds).sum(), [p], epsilon=1e-5, fd_dtype=np.float64).passed


class TestGradientPatches:
    def test_tile_count(self):
        g, lam = gradient_patches(np.zeros((4, 4)), 2)
        assert g.shape == (4, 2, 2) and lam.shape == (4,)

    def test_constant(self):
        _, lam = gradient_patches(np.full((4, 4), 0.7), 2)
        np.testing.assert_array_equal(lam, 0.7)

    def test_known_tile(self):
        _, lam = gradient_patches(np.array([[1.0, 3.0], [2.0, 2.0]]), 2)
        assert lam[0] == 2.0

    def test_row_major_tiles(self):
        ce = np.arange(16.0).reshape(4, 4)
        g, _ = gradient_patches(ce, 2)
        np.testing.assert_array_equal(g[1], [[2, 3], [6, 7]])
        np.testing.assert_array_equal(g[2], [[8, 9], [12, 13]])

    def test_ignored_pixels_excluded(self):
        ce = np.array([[1.0, 9.0], [3.0, 9.0]])
        valid = np.array([[True, False], [True, False]])
        _, lam = gradient_patches(ce, 2, valid)
        assert lam[0] == 2.0

    def test_fully_ignored_tile(self):
        ce = np.array([[1.0, 3.0, 5.0, 5.0], [1.0, 3.0, 5.0, 5.0]] * 2)
        valid = np.ones((4, 4), bool)
        valid[:2, 2:] = False
        g, lam = gradient_patches(ce, 2, valid)
        assert np.isnan(lam[1])
        assert global_lambda(lam) == pytest.approx(np.nanmean(lam))
        masks = clipping_mask(g, lam, global_lambda(lam))
        assert masks[1].all()

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            gradient_patches(np.zeros((6, 6)), 4)

    def test_accepts_config(self):
        _, lam = gradient_patches(np.ones((8, 8)), DecoderConfig(output_size=8, grad_patch_size=4))
        assert lam.shape == (4,)


class TestGlobalLambda:
    @pytest.mark.parametrize("lam,expected", [([1.0, 3.0], 2.0), ([0.4] * 5, 0.4), ([2.5], 2.5)])
    def test_values(self, lam, expected):
        assert global_lambda(lam) == expected


class TestClippingMask:
    def test_uniform_keeps_everything(self):
        g, lam = gradient_patches(np.full((4, 4), 0.3), 2)
        assert clipping_mask(g, lam, global_lambda(lam)).all()

    def test_worked_example(self):
        g = np.array([[[1.0, 3.0]], [[2.0, 6.0]]])
        lam = np.array([2.0, 4.0])
        assert global_lambda(lam) == 3.0
        masks = clipping_mask(g, lam, 3.0)
        np.testing.assert_array_equal(masks[0], [[1, 1]])
        np.testing.assert_array_equal(masks[1], [[1, 0]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ce = rng.exponential(size=(8, 8))
            g, lam = gradient_patches(ce, 4)
            np.testing.assert_array_equal(clipping_mask(g, lam, global_lambda(lam)), brute_force_mask(ce, 4))

    def test_every_tile_keeps_a_pixel(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            ce = rng.exponential(size=(8, 8)) * rng.uniform(0.01, 10)
            g, lam = gradient_patches(ce, 2)
            masks = clipping_mask(g, lam, global_lambda(lam))
            assert masks.reshape(len(masks), -1).sum(1).min() >= 1

    def test_retained_mean_not_larger(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            ce = rng.gamma(0.5, size=(8, 8))
            g, lam = gradient_patches(ce, 4)
            m = clipping_mask(g, lam, global_lambda(lam)).astype(bool)
            assert g[m].mean() <= g.mean() + 1e-12
            for t in range(len(g)):
                assert g[t][m[t]].mean() <= g[t].mean() + 1e-12

    def test_bit_stable(self):
        ce = np.random.default_rng(3).exponential(size=(16, 16))
        g, lam = gradient_patches(ce, 4)
        a = clipping_mask(g, lam, global_lambda(lam))
        b = clipping_mask(g, lam, global_lambda(lam))
        assert a.tobytes() == b.tobytes()


class TestGate:
    def test_closed_above_tau(self):
        ce = np.full((2, 2), 2.0)
        out, gated = gated_clip(ce, np.zeros((1, 2, 2)), 2.0, 1.2)
        assert not gated
        np.testing.assert_array_equal(out, ce)

    def test_open_below_tau(self):
        ce = np.array([[1.0, 0.5], [2.0, 0.5]])
        masks = np.array([[[1, 1], [0, 1]]])
        out, gated = gated_clip(ce, masks, 1.0, 1.2)
        assert gated
        np.testing.assert_array_equal(out, ce * masks[0])

    def test_limits(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ce = rng.exponential(size=(8, 8)) + 1e-6
            assert clip_report(ce, 4, 1e30).gated
            rep = clip_report(ce, 4, 1e-30)
            assert not rep.gated and rep.masks.all()

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            gated_clip(np.ones((2, 2)), np.ones((1, 2, 2)), 0.5, 0.0)

    def test_report_invariants(self):
        ce = np.random.default_rng(1).exponential(size=(8, 8))
        rep = clip_report(ce, 4, 10.0)
        assert rep.lambda_global == pytest.approx(rep.lambda_i.mean(), abs=1e-6)
        assert set(np.unique(rep.masks)) <= {0, 1}
        assert retained_pixels(rep, 8).shape == (8, 8)

    def test_external_gate_value(self):
        ce = np.random.default_rng(2).exponential(size=(8, 8)) * 0.1
        assert not clip_report(ce, 4, 1.2, lambda_gate=5.0).gated
