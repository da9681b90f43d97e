"""End-to-end fine CAM generation.

A 3x3 convolution over the arranged final patch tokens gives the coarse CAM.
Adaptive attention fusion turns the attention stack into one weight per head
(pooling, a two-layer FFN, sigmoid); the weights average the class-to-patch and
patch-to-patch attention blocks, which refine the coarse CAM into the fine CAM.
Image-level predictions from class tokens, coarse CAM and fine CAM are each
scored with the multi-label soft margin loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (Parameter, Tensor, as_tensor, clamp, clamp_min, conv2d_same, gelu,
                       global_avg_pool, log, sigmoid)
from .vit import (EncoderConfig, Linear, VitEncoder, extract_cross_attention,
                  extract_patch_attention, trunc_normal)

FUSIONS = ("aaf", "mean_sum", "random_fixed")


@dataclass
class AafConfig:
    hidden_dim: int = 18
    input_dim: int = 4

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


@dataclass
class CamBundle:
    cam_coarse: Tensor      # (..., N, N, C)
    weights_w: Tensor       # (..., K*H)
    weights_wprime: Tensor  # (..., K*H)
    ca_hat: Tensor          # (..., N, N, C)
    pa_hat: Tensor          # (..., N*N, N*N)
    cam_fine: Tensor        # (..., N, N, C)


@dataclass
class LossBreakdown:
    l_cls_token: float
    l_coarse_cam: float
    l_fine_cam: float
    total: float


class AafHead:
    """FFN(K*H -> hidden -> K*H) with GELU inside and a sigmoid on top."""

    def __init__(self, rng, cfg: AafConfig, name: str = "aaf"):
        self.cfg = cfg
        self.fc1 = Linear(rng, cfg.input_dim, cfg.hidden_dim, f"{name}.fc1")
        self.fc2 = Linear(rng, cfg.hidden_dim, cfg.input_dim, f"{name}.fc2")

    def __call__(self, w: Tensor) -> Tensor:
        w = as_tensor(w)
        if w.ndim == 1:
            return self(w.reshape(1, -1)).reshape(-1)
        out = sigmoid(self.fc2(gelu(self.fc1(w))))
        # float32 sigmoid rounds to exactly 0 or 1 for large |z|; keep the weights
        # strictly inside (0, 1) by clipping to the nearest interior values
        dt = out.data.dtype
        return clamp(out, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))

    def parameters(self) -> list:
        return self.fc1.parameters() + self.fc2.parameters()


def coarse_cam(t_final, weight, bias, num_classes: int) -> Tensor:
    """Arrange the last N*N tokens to (N, N, D) and convolve to C channels."""
    t_final = as_tensor(t_final)
    patches = t_final[..., num_classes:, :]
    n = int(round(np.sqrt(patches.shape[-2])))
    grid = patches.reshape(*patches.shape[:-2], n, n, patches.shape[-1])
    return conv2d_same(grid, weight, bias)


def pool_heads(stack) -> Tensor:
    """W: global average of every head's full attention map."""
    return global_avg_pool(as_tensor(stack), axes=2)


def adaptive_fuse(stack, head: AafHead) -> tuple[Tensor, Tensor]:
    """Return (W, W') for an attention stack ``(..., K*H, T, T)``."""
    w = pool_heads(stack)
    return w, head(w)


def weighted_attention(ca, pa, wprime) -> tuple[Tensor, Tensor]:
    """Head-weighted averages (1/KH) sum_i W'_i CA_i and (1/KH) sum_i W'_i PA_i."""
    ca, pa, wprime = as_tensor(ca), as_tensor(pa), as_tensor(wprime)
    kh = ca.shape[-4]
    if pa.shape[-3] != kh or wprime.shape[-1] != kh:
        raise ValueError(f"head counts disagree: CA {ca.shape}, PA {pa.shape}, W' {wprime.shape}")
    scale = 1.0 / kh
    w_ca = wprime.reshape(*wprime.shape, 1, 1, 1)
    w_pa = wprime.reshape(*wprime.shape, 1, 1)
    ca_hat = (ca * w_ca).sum(axis=-4) * scale
    pa_hat = (pa * w_pa).sum(axis=-3) * scale
    return ca_hat, pa_hat


def fine_cam(cam_coarse, ca_hat, pa_hat) -> Tensor:
    """PA_hat @ reshape_(N*N, C)(coarse * CA_hat), reshaped back to (N, N, C)."""
    cam_coarse, ca_hat, pa_hat = as_tensor(cam_coarse), as_tensor(ca_hat), as_tensor(pa_hat)
    *lead, n, _, c = cam_coarse.shape
    flat = (cam_coarse * ca_hat).reshape(*lead, n * n, c)
    return (pa_hat @ flat).reshape(*lead, n, n, c)


def spatial_logits(cam) -> Tensor:
    """Per-class spatial mean of a ``(..., N, N, C)`` CAM."""
    return as_tensor(cam).mean(axis=(-3, -2))


def class_token_logits(t_final, head: Linear, num_classes: int) -> Tensor:
    """Shared D -> 1 head applied to each class-token row."""
    cls = as_tensor(t_final)[..., :num_classes, :]
    out = head(cls)
    return out.reshape(*out.shape[:-1])


def multilabel_soft_margin(y_hat, y) -> Tensor:
    """-(1/C) sum_i [y_i log s(y^_i) + (1 - y_i) log(1 - s(y^_i))], batch-averaged.

    Log arguments are clamped below at 1e-12.
    """
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.data.dtype)
    if y.shape != y_hat.shape:
        raise ValueError(f"label shape {y.shape} != prediction shape {y_hat.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be multi-hot (0/1)")
    p = sigmoid(y_hat)
    pos = log(clamp_min(p, 1e-12))
    negp = log(clamp_min(1.0 - p, 1e-12))
    per_item = -(pos * y + negp * (1.0 - y)).mean(axis=-1)
    return per_item.mean()


def total_loss(logits: tuple, y) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the three soft margin losses for (cls, coarse, fine)."""
    y_cls, y_coarse, y_fine = logits
    parts = [multilabel_soft_margin(v, y) for v in (y_cls, y_coarse, y_fine)]
    total = parts[0] + parts[1] + parts[2]
    vals = [p.item() for p in parts]
    return total, LossBreakdown(vals[0], vals[1], vals[2], float(sum(vals)))


class WeakTrCam:
    """Encoder plus CAM heads; ``fusion`` picks how head weights W' are made.

    * ``"aaf"``: W' = sigmoid(FFN(pool(A))), learned end to end.
    * ``"mean_sum"``: W' = 1 for every head (no fusion parameters used).
    * ``"random_fixed"``: the pooled W is replaced by a frozen random vector;
      the FFN is still trained.
    """

    def __init__(self, cfg: EncoderConfig, aaf: AafConfig | None = None, fusion: str = "aaf"):
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        self.cfg = cfg
        self.fusion = fusion
        self.aaf_cfg = aaf or AafConfig(input_dim=cfg.num_maps)
        self.aaf_cfg.input_dim = cfg.num_maps
        self.encoder = VitEncoder(cfg)
        rng = np.random.default_rng([cfg.seed, 1])
        d, c = cfg.embed_dim, cfg.num_classes
        self.conv_weight = Parameter(trunc_normal(rng, (3, 3, d, c)), "cam.conv.weight")
        self.conv_bias = Parameter(np.zeros(c, np.float32), "cam.conv.bias")
        self.cls_head = Linear(rng, d, 1, "cam.cls_head")
        self.aaf = AafHead(rng, self.aaf_cfg)
        self.fixed_w = rng.uniform(0.0, 1.0, cfg.num_maps).astype(np.float32)

    def parameters(self) -> list:
        out = self.encoder.parameters() + [self.conv_weight, self.conv_bias]
        out += self.cls_head.parameters()
        if self.fusion != "mean_sum":
            out += self.aaf.parameters()
        return out

    def fuse(self, stack: Tensor) -> tuple[Tensor, Tensor]:
        w = pool_heads(stack)
        if self.fusion == "mean_sum":
            return w, Tensor(np.ones(w.shape))
        if self.fusion == "random_fixed":
            w = Tensor(np.broadcast_to(self.fixed_w, w.shape))
        return w, self.aaf(w)

    def forward(self, images) -> tuple[CamBundle, Tensor]:
        cfg = self.cfg
        t_final, stack = self.encoder(images)
        coarse = coarse_cam(t_final, self.conv_weight, self.conv_bias, cfg.num_classes)
        w, wprime = self.fuse(stack)
        ca = extract_cross_attention(stack, cfg)
        pa = extract_patch_attention(stack, cfg)
        ca_hat, pa_hat = weighted_attention(ca, pa, wprime)
        fine = fine_cam(coarse, ca_hat, pa_hat)
        return CamBundle(coarse, w, wprime, ca_hat, pa_hat, fine), t_final

    def logits(self, bundle: CamBundle, t_final: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (class_token_logits(t_final, self.cls_head, self.cfg.num_classes),
                spatial_logits(bundle.cam_coarse), spatial_logits(bundle.cam_fine))

    def loss(self, images, labels) -> tuple[Tensor, LossBreakdown]:
        bundle, t_final = self.forward(images)
        return total_loss(self.logits(bundle, t_final), labels)
