import numpy as np
import pytest

from weaktr.numerics import ShapeError, check_gradient
from weaktr.vit import (EncoderConfig, VitEncoder, extract_cross_attention,
                        extract_patch_attention, patchify)


@pytest.fixture
def small_cfg():
    return EncoderConfig(image_size=8, patch_size=4, num_classes=3, embed_dim=8,
                         layers=2, heads=2, seed=7)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=30, heads=4)


def test_patchify_row_major():
    img = np.arange(4 * 4 * 1, dtype=np.float32).reshape(4, 4, 1)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[2], [8, 9, 12, 13])


class TestPatchEmbed:
    def test_sequence_length(self, small_cfg):
        enc = VitEncoder(small_cfg)
        tokens = enc.patch_embed(np.zeros((8, 8, 3)))
        assert tokens.shape == (3 + 4, 8)

    def test_zero_image_gives_positional_rows(self, small_cfg):
        enc = VitEncoder(small_cfg)
        tokens = enc.patch_embed(np.zeros((8, 8, 3)))
        np.testing.assert_array_equal(tokens.data[3:], enc.pos_embed.data[3:])
        np.testing.assert_allclose(tokens.data[:3], enc.cls_tokens.data + enc.pos_embed.data[:3])

    def test_seed_determinism(self, small_cfg):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        a = VitEncoder(small_cfg).patch_embed(img).data
        b = VitEncoder(small_cfg).patch_embed(img).data
        assert a.tobytes() == b.tobytes()

    def test_bad_image(self, small_cfg):
        with pytest.raises(ShapeError):
            VitEncoder(small_cfg).patch_embed(np.zeros((9, 8, 3)))


class TestEncode:
    def test_attention_rows_are_distributions(self, small_cfg):
        enc = VitEncoder(small_cfg)
        img = np.random.default_rng(1).uniform(size=(2, 8, 8, 3))
        t_final, stack = enc(img)
        assert t_final.shape == (2, 7, 8)
        assert stack.shape == (2, 4, 7, 7)
        np.testing.assert_allclose(stack.data.sum(-1), 1.0, atol=1e-5)

    def test_minimal_stack_shape(self):
        cfg = EncoderConfig(image_size=4, patch_size=4, num_classes=1, embed_dim=4, layers=1, heads=1)
        _, stack = VitEncoder(cfg)(np.zeros((4, 4, 3)))
        assert stack.shape == (1, 2, 2)

    def test_deterministic(self, small_cfg):
        enc = VitEncoder(small_cfg)
        img = np.random.default_rng(2).uniform(size=(8, 8, 3))
        a, sa = enc(img)
        b, sb = enc(img)
        assert a.data.tobytes() == b.data.tobytes()
        assert sa.data.tobytes() == sb.data.tobytes()

    def test_zeroed_query_key_gives_uniform_attention(self, small_cfg):
        enc = VitEncoder(small_cfg)
        d = small_cfg.embed_dim
        for blk in enc.blocks:
            blk.qkv.weight.data[:, :2 * d] = 0
            blk.qkv.bias.data[:2 * d] = 0
        _, stack = enc(np.random.default_rng(3).uniform(size=(8, 8, 3)))
        t = small_cfg.num_tokens
        np.testing.assert_allclose(stack.data, 1.0 / t, rtol=1e-6)
        ca = extract_cross_attention(stack, small_cfg).data
        pa = extract_patch_attention(stack, small_cfg).data
        np.testing.assert_allclose(ca, 1.0 / t, rtol=1e-6)
        np.testing.assert_allclose(pa, 1.0 / t, rtol=1e-6)

    def test_gradient_of_scalar_of_final_tokens(self, small_cfg):
        enc = VitEncoder(small_cfg)
        img = np.random.default_rng(4).uniform(size=(8, 8, 3))
        weights = np.random.default_rng(5).normal(size=(7, 8))

        def loss():
            t, _ = enc(img)
            return (t * weights).sum()

        rep = check_gradient(loss, enc.parameters(), epsilon=1e-5, fd_dtype=np.float64, floor=1e-4)
        assert rep.passed, rep.worst()


def _brute_ca(stack, c, n):
    kh = stack.shape[0]
    out = np.zeros((kh, n, n, c))
    for h in range(kh):
        for cls in range(c):
            for p in range(n * n):
                out[h, p // n, p % n, cls] = stack[h, cls, c + p]
    return out


def _brute_pa(stack, c, n):
    kh = stack.shape[0]
    out = np.zeros((kh, n * n, n * n))
    for h in range(kh):
        for i in range(n * n):
            for j in range(n * n):
                out[h, i, j] = stack[h, c + i, c + j]
    return out


def _random_stack(rng, kh, t):
    x = rng.uniform(size=(kh, t, t))
    return x / x.sum(-1, keepdims=True)


class TestExtraction:
    cfg = EncoderConfig(image_size=8, patch_size=4, num_classes=2, embed_dim=4, layers=1, heads=2)

    def test_degenerate(self):
        cfg = EncoderConfig(image_size=4, patch_size=4, num_classes=1, embed_dim=4, layers=1, heads=1)
        stack = np.array([[[0.3, 0.7], [0.4, 0.6]]])
        ca = extract_cross_attention(stack, cfg).data
        assert ca.shape == (1, 1, 1, 1)
        assert ca.item() == pytest.approx(0.7)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        stack = _random_stack(rng, 2, 6)
        np.testing.assert_allclose(extract_cross_attention(stack, self.cfg).data, _brute_ca(stack, 2, 2), rtol=1e-6)
        np.testing.assert_allclose(extract_patch_attention(stack, self.cfg).data, _brute_pa(stack, 2, 2), rtol=1e-6)

    def test_ranges(self):
        stack = _random_stack(np.random.default_rng(1), 2, 6)
        ca = extract_cross_attention(stack, self.cfg).data
        pa = extract_patch_attention(stack, self.cfg).data
        assert ca.min() >= 0 and ca.max() <= 1
        assert np.all(pa.sum(-1) <= 1 + 1e-6)

    def test_head_permutation_commutes(self):
        rng = np.random.default_rng(2)
        cfg = EncoderConfig(image_size=8, patch_size=4, num_classes=2, embed_dim=4, layers=2, heads=2)
        stack = _random_stack(rng, 4, 6)
        perm = rng.permutation(4)
        np.testing.assert_array_equal(extract_cross_attention(stack[perm], cfg).data,
                                      extract_cross_attention(stack, cfg).data[perm])
        np.testing.assert_array_equal(extract_patch_attention(stack[perm], cfg).data,
                                      extract_patch_attention(stack, cfg).data[perm])

    def test_batched_leading_axis(self):
        rng = np.random.default_rng(3)
        stack = np.stack([_random_stack(rng, 2, 6) for _ in range(3)])
        ca = extract_cross_attention(stack, self.cfg).data
        for b in range(3):
            np.testing.assert_allclose(ca[b], _brute_ca(stack[b], 2, 2), rtol=1e-6)
