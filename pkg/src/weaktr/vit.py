"""Plain ViT encoder with C class tokens that keeps every attention map."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (Parameter, ShapeError, Tensor, as_tensor, concat, gelu,
                       layer_norm, softmax_last)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, np.float32), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class LayerNorm:
    def __init__(self, dim: int, name: str, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim, np.float32), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, np.float32), f"{name}.beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> list:
        return [self.gamma, self.beta]


class Block:
    """Pre-norm transformer layer: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float, name: str):
        if dim % heads:
            raise ShapeError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.norm1 = LayerNorm(dim, f"{name}.norm1")
        self.qkv = Linear(rng, dim, 3 * dim, f"{name}.attn.qkv")
        self.proj = Linear(rng, dim, dim, f"{name}.attn.proj")
        self.norm2 = LayerNorm(dim, f"{name}.norm2")
        hidden = int(round(dim * mlp_ratio))
        self.fc1 = Linear(rng, dim, hidden, f"{name}.mlp.fc1")
        self.fc2 = Linear(rng, hidden, dim, f"{name}.mlp.fc2")

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        *lead, t, d = x.shape
        h, dh = self.heads, self.head_dim
        qkv = self.qkv(x).reshape(*lead, t, 3, h, dh)
        # -> (3, ..., h, t, dh)
        nl = len(lead)
        axes = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
        qkv = qkv.transpose(axes)
        q, k, v = qkv[0], qkv[1], qkv[2]
        kt = k.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))
        attn = softmax_last((q @ kt) * (dh ** -0.5))
        out = attn @ v
        out = out.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, t, d)
        return self.proj(out), attn

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, attn = self.attention(self.norm1(x))
        x = x + a
        x = x + self.fc2(gelu(self.fc1(self.norm2(x))))
        return x, attn

    def parameters(self) -> list:
        out = []
        for m in (self.norm1, self.qkv, self.proj, self.norm2, self.fc1, self.fc2):
            out += m.parameters()
        return out


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    num_classes: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.num_classes < 1 or self.layers < 1 or self.heads < 1 or self.embed_dim < 4:
            raise ValueError("num_classes, layers, heads must be >= 1 and embed_dim >= 4")

    @property
    def grid(self) -> int:
        """N: patches per side."""
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.num_classes + self.grid ** 2

    @property
    def num_maps(self) -> int:
        """K*H attention maps per forward pass."""
        return self.layers * self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., O, O, ch) -> (..., N*N, patch*patch*ch), patches in row-major order."""
    images = np.asarray(images)
    *lead, h, w, ch = images.shape
    n = h // patch
    x = images.reshape(*lead, n, patch, n, patch, ch)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, n * n, patch * patch * ch)


class VitEncoder:
    """Patch embedding, C learned class tokens and K pre-norm layers.

    ``encode`` returns the final token sequence together with the attention
    stack of shape ``(..., K*H, C+N*N, C+N*N)`` in layer-major, head-minor order.
    """

    def __init__(self, cfg: EncoderConfig, name: str = "encoder"):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        self.patch_proj = Linear(rng, cfg.patch_size ** 2 * cfg.channels, d, f"{name}.patch_embed")
        self.cls_tokens = Parameter(trunc_normal(rng, (cfg.num_classes, d)), f"{name}.cls_tokens")
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.num_tokens, d)), f"{name}.pos_embed")
        self.blocks = [Block(rng, d, cfg.heads, cfg.mlp_ratio, f"{name}.blocks.{i}")
                       for i in range(cfg.layers)]
        self.norm = LayerNorm(d, f"{name}.norm")

    def parameters(self) -> list:
        out = self.patch_proj.parameters() + [self.cls_tokens, self.pos_embed]
        for b in self.blocks:
            out += b.parameters()
        return out + self.norm.parameters()

    def patch_embed(self, images) -> Tensor:
        """Images ``(..., O, O, ch)`` -> tokens ``(..., C+N*N, D)``."""
        cfg = self.cfg
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        expect = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.shape[-3:] != expect:
            raise ShapeError(f"image shape {images.shape} does not end with {expect}")
        patches = self.patch_proj(as_tensor(patchify(images, cfg.patch_size)))
        lead = patches.shape[:-2]
        cls = self.cls_tokens
        if lead:
            cls = cls + Tensor(np.zeros(lead + cls.shape))
        return concat([cls, patches], axis=-2) + self.pos_embed

    def encode(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if tokens.shape[-2:] != (cfg.num_tokens, cfg.embed_dim):
            raise ShapeError(f"token sequence {tokens.shape} does not match "
                             f"({cfg.num_tokens}, {cfg.embed_dim})")
        maps = []
        x = tokens
        for block in self.blocks:
            x, attn = block(x)
            maps.append(attn)
        return self.norm(x), concat(maps, axis=-3)

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        return self.encode(self.patch_embed(images))


def extract_cross_attention(stack, cfg: EncoderConfig) -> Tensor:
    """Class-token rows x patch-token columns -> ``(..., K*H, N, N, C)``."""
    stack = as_tensor(stack)
    c, n = cfg.num_classes, cfg.grid
    block = stack[..., :c, c:]
    lead = block.shape[:-2]
    nl = len(lead)
    block = block.transpose(tuple(range(nl)) + (nl + 1, nl))
    return block.reshape(*lead, n, n, c)


def extract_patch_attention(stack, cfg: EncoderConfig) -> Tensor:
    """Patch-row x patch-column block -> ``(..., K*H, N*N, N*N)``, not renormalized."""
    stack = as_tensor(stack)
    c = cfg.num_classes
    return stack[..., c:, c:]
