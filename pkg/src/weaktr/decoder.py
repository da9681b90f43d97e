"""Segmentation decoder with per-pixel gradient clipping.

The decoder runs transformer layers over ``[Q; T]`` (fresh class tokens for
the segmentation classes plus encoder patch tokens), scores each patch
against each class by cosine similarity, normalizes the scores with LN and
upsamples them to the image resolution.

During training the per-pixel cross-entropy map is tiled into S x S gradient
patches. A pixel keeps its gradient when its value does not exceed the larger
of its tile mean and the image mean; clipping only starts once the image mean
falls to the start value tau.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (Parameter, ShapeError, Tensor, as_tensor, concat, l2_normalize,
                       log_softmax_last, upsample_bilinear)
from .vit import Block, LayerNorm, trunc_normal

IGNORE = 255
GATE_MODES = ("batch", "image")


@dataclass
class DecoderConfig:
    num_classes: int = 5          # C_seg, background included
    embed_dim: int = 32
    heads: int = 2
    decoder_layers: int = 2
    mlp_ratio: float = 4.0
    output_size: int = 64         # O
    grad_patch_size: int = 16     # S
    start_value: float = 1.2      # tau
    gate: str = "batch"
    seed: int = 0

    def __post_init__(self):
        if self.output_size % self.grad_patch_size:
            raise ValueError(f"gradient patch size {self.grad_patch_size} does not divide "
                             f"output size {self.output_size}")
        if not self.start_value > 0:
            raise ValueError("start value tau must be positive")
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}")

    @property
    def tiles_per_side(self) -> int:
        """L = O / S."""
        return self.output_size // self.grad_patch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prediction:
    logits: Tensor   # (..., O, O, C_seg)


@dataclass
class ClipReport:
    grad_patches: np.ndarray   # (L*L, S, S)
    lambda_i: np.ndarray       # (L*L,), NaN for fully ignored tiles
    lambda_global: float
    masks: np.ndarray          # (L*L, S, S) of 0/1
    gated: bool


class SegDecoder:
    def __init__(self, cfg: DecoderConfig, name: str = "decoder"):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 2])
        d = cfg.embed_dim
        self.cls_tokens = Parameter(trunc_normal(rng, (cfg.num_classes, d)), f"{name}.cls_tokens")
        self.blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio, f"{name}.blocks.{i}")
                       for i in range(cfg.decoder_layers)]
        self.mask_norm = LayerNorm(cfg.num_classes, f"{name}.mask_norm")

    def parameters(self) -> list:
        out = [self.cls_tokens]
        for b in self.blocks:
            out += b.parameters()
        return out + self.mask_norm.parameters()

    def __call__(self, patch_tokens: Tensor) -> Prediction:
        patch_tokens = as_tensor(patch_tokens)
        q = self.cls_tokens
        lead = patch_tokens.shape[:-2]
        if lead:
            q = q + Tensor(np.zeros(lead + q.shape))
        return decode(q, patch_tokens, self.cfg, self.blocks, self.mask_norm)


def decode(q, t, cfg: DecoderConfig, blocks=(), mask_norm: LayerNorm | None = None) -> Prediction:
    """Class tokens ``(..., C_seg, D)`` and patch tokens ``(..., N*N, D)`` -> O x O logits."""
    q, t = as_tensor(q), as_tensor(t)
    if q.shape[-1] != t.shape[-1]:
        raise ShapeError(f"class tokens {q.shape} and patch tokens {t.shape} differ in width")
    c_seg, d = q.shape[-2], q.shape[-1]
    n2 = t.shape[-2]
    n = int(round(np.sqrt(n2)))
    if n * n != n2:
        raise ShapeError(f"{n2} patch tokens do not form a square grid")
    x = concat([q, t], axis=-2)
    for block in blocks:
        x, _ = block(x)
    q_hat = l2_normalize(x[..., :c_seg, :])
    t_hat = l2_normalize(x[..., c_seg:, :])
    nl = q_hat.ndim - 2
    scores = (t_hat @ q_hat.transpose(tuple(range(nl)) + (nl + 1, nl))) * (d ** -0.5)
    if mask_norm is None:
        mask_norm = LayerNorm(c_seg, "mask_norm")
    scores = mask_norm(scores)
    grid = scores.reshape(*scores.shape[:-2], n, n, c_seg)
    return Prediction(upsample_bilinear(grid, cfg.output_size, cfg.output_size))


def per_pixel_ce(pred, seeds) -> Tensor:
    """Softmax cross-entropy per pixel; ``IGNORE`` pixels are 0 and carry no gradient."""
    logits = pred.logits if isinstance(pred, Prediction) else as_tensor(pred)
    seeds = np.asarray(seeds)
    c_seg = logits.shape[-1]
    if seeds.shape != logits.shape[:-1]:
        raise ShapeError(f"seed map {seeds.shape} vs logits {logits.shape}")
    valid = seeds != IGNORE
    if np.any(valid & ((seeds < 0) | (seeds >= c_seg))):
        raise ValueError(f"seed labels must lie in [0, {c_seg}) or equal {IGNORE}")
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    idx = np.nonzero(valid)
    onehot[idx + (seeds[idx].astype(int),)] = 1.0
    return -(log_softmax_last(logits) * onehot).sum(axis=-1)


def _tiles(a: np.ndarray, s: int) -> np.ndarray:
    """(O, O) -> (L*L, S, S), tiles in row-major order."""
    o = a.shape[0]
    l = o // s
    return a.reshape(l, s, l, s).transpose(0, 2, 1, 3).reshape(l * l, s, s)


def _untile(t: np.ndarray, o: int) -> np.ndarray:
    s = t.shape[-1]
    l = o // s
    return t.reshape(l, l, s, s).transpose(0, 2, 1, 3).reshape(o, o)


def gradient_patches(ce_map, patch_size, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Tile an O x O CE map and average each tile over its valid pixels.

    Tiles with no valid pixel get ``lambda_i = NaN``.
    """
    if isinstance(patch_size, DecoderConfig):
        patch_size = patch_size.grad_patch_size
    ce = np.asarray(ce_map.data if isinstance(ce_map, Tensor) else ce_map, dtype=np.float64)
    o = ce.shape[0]
    if ce.shape != (o, o) or o % patch_size:
        raise ShapeError(f"CE map {ce.shape} cannot be tiled by {patch_size}")
    g = _tiles(ce, patch_size)
    v = np.ones_like(g, dtype=bool) if valid is None else _tiles(np.asarray(valid, bool), patch_size)
    count = v.sum(axis=(1, 2))
    total = np.where(v, g, 0.0).sum(axis=(1, 2))
    lo = np.where(v, g, np.inf).min(axis=(1, 2))
    hi = np.where(v, g, -np.inf).max(axis=(1, 2))
    # the clamp only removes rounding error: a mean lies within [min, max]
    lam = np.clip(total / np.maximum(count, 1), lo, hi)
    lam[count == 0] = np.nan
    return g, lam


def global_lambda(lambda_i) -> float:
    """Mean of the tile means, skipping NaN entries (fully ignored tiles)."""
    lam = np.asarray(lambda_i, dtype=np.float64)
    kept = lam[~np.isnan(lam)]
    if not kept.size:
        return 0.0
    return float(np.clip(kept.mean(), kept.min(), kept.max()))


def clipping_mask(grad_patches, lambda_i, lambda_global: float) -> np.ndarray:
    """1 where a value is <= max(its tile mean, the global mean), else 0."""
    g = np.asarray(grad_patches)
    lam = np.asarray(lambda_i, dtype=np.float64)
    thresh = np.maximum(lam, lambda_global)
    mask = (g <= thresh[:, None, None]).astype(np.uint8)
    # fully ignored tiles keep everything by convention
    mask[np.isnan(lam)] = 1
    return mask


def gated_clip(ce_map, masks, lambda_global: float, tau: float) -> tuple[np.ndarray, bool]:
    """Apply ``masks`` only when ``lambda_global <= tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    ce = np.asarray(ce_map.data if isinstance(ce_map, Tensor) else ce_map)
    if lambda_global <= tau:
        return ce * _untile(np.asarray(masks), ce.shape[0]), True
    return ce.copy(), False


def clip_report(ce_map, patch_size: int, tau: float, valid=None,
                lambda_gate: float | None = None) -> ClipReport:
    """All clipping statistics for one image.

    ``lambda_gate`` overrides the value compared with tau (the batch mean of
    per-image global lambdas when gating per batch).
    """
    g, lam = gradient_patches(ce_map, patch_size, valid)
    lg = global_lambda(lam)
    masks = clipping_mask(g, lam, lg)
    gate_value = lg if lambda_gate is None else lambda_gate
    gated = gate_value <= tau
    if not gated:
        masks = np.ones_like(masks)
    return ClipReport(g, lam, lg, masks, bool(gated))


def retained_pixels(report: ClipReport, output_size: int) -> np.ndarray:
    """O x O boolean map of pixels whose gradient survives clipping."""
    return _untile(report.masks, output_size).astype(bool)
