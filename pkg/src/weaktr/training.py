"""Two-phase pipeline: CAM training, CAM-to-seed conversion, online retraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from .cam import AafConfig, WeakTrCam
from .decoder import (IGNORE, DecoderConfig, Prediction, SegDecoder, clip_report,
                      per_pixel_ce, retained_pixels)
from .metrics import EvalReport, evaluate
from .numerics import Tensor, no_grad, upsample_bilinear
from .optim import SGD, AdamW, ParamGroup, polynomial, warmup_cosine
from .synthetic import stack_split
from .vit import EncoderConfig, VitEncoder

log = logging.getLogger(__name__)

CLIP_MODES = ("clip", "none", "gt")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    phase: str = "cam"
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    schedule: str = "cosine"
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.9
    encoder_lr_scale: float = 0.1
    seed: int = 0
    fusion: str = "aaf"
    clip: str = "clip"
    poly_power: float = 0.9

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.phase not in ("cam", "retrain"):
            raise ValueError(f"phase must be 'cam' or 'retrain', got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "polynomial"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.clip not in CLIP_MODES:
            raise ValueError(f"clip must be one of {CLIP_MODES}")

    @classmethod
    def retraining(cls, **kw) -> "TrainConfig":
        base = dict(phase="retrain", epochs=20, batch_size=4, base_lr=0.05, warmup_epochs=0,
                    schedule="polynomial", weight_decay=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeedConfig:
    background_threshold: float = 0.40
    ignore_band: tuple | None = None

    def __post_init__(self):
        if not 0 < self.background_threshold < 1:
            raise ValueError("background threshold must lie in (0, 1)")
        if self.ignore_band is not None:
            self.ignore_band = tuple(self.ignore_band)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _decay_groups(params, weight_decay: float, lr_scale: float = 1.0) -> list:
    # no decay on biases, norms, tokens and positional embeddings
    decay = [p for p in params if p.ndim >= 2 and "token" not in p.name and "pos_embed" not in p.name]
    ids = {id(p) for p in decay}
    rest = [p for p in params if id(p) not in ids]
    return [ParamGroup(decay, lr_scale, weight_decay), ParamGroup(rest, lr_scale, 0.0)]


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def train_cam(cfg: TrainConfig, samples, enc_cfg: EncoderConfig,
              aaf_cfg: AafConfig | None = None, model: WeakTrCam | None = None):
    """Optimize the encoder and CAM heads on the summed soft margin losses.

    Returns the model and a curve dict with per-epoch mean losses.
    """
    images, labels, _ = stack_split(samples)
    model = model or WeakTrCam(enc_cfg, aaf_cfg, fusion=cfg.fusion)
    params = model.parameters()
    opt = AdamW(_decay_groups(params, cfg.weight_decay), betas=cfg.betas)
    rng = np.random.default_rng([cfg.seed, 10])
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    curve = {"epoch_loss": [], "epoch_parts": []}
    step = 0
    for epoch in range(cfg.epochs):
        losses, parts = [], []
        for idx in _batches(len(images), cfg.batch_size, rng):
            if cfg.schedule == "cosine":
                lr = cfg.base_lr * warmup_cosine(step, total, warmup)
            else:
                lr = cfg.base_lr * polynomial(step, total, cfg.poly_power)
            opt.zero_grad()
            loss, br = model.loss(images[idx], labels[idx])
            if not np.isfinite(br.total):
                raise TrainingDiverged(step, br.total)
            loss.backward()
            opt.step(lr)
            losses.append(br.total)
            parts.append((br.l_cls_token, br.l_coarse_cam, br.l_fine_cam))
            step += 1
        curve["epoch_loss"].append(float(np.mean(losses)))
        curve["epoch_parts"].append([float(x) for x in np.mean(parts, axis=0)])
        log.info("cam epoch %d loss %.4f", epoch, curve["epoch_loss"][-1])
    return model, curve


def compute_cams(model: WeakTrCam, images, batch_size: int = 32) -> dict:
    """Coarse/fine CAMs, fused weights and logits for every image (no graph)."""
    out = {"cam_coarse": [], "cam_fine": [], "wprime": [], "logits": []}
    with no_grad():
        for i in range(0, len(images), batch_size):
            bundle, t_final = model.forward(images[i:i + batch_size])
            y_cls, y_coarse, y_fine = model.logits(bundle, t_final)
            out["cam_coarse"].append(bundle.cam_coarse.data)
            out["cam_fine"].append(bundle.cam_fine.data)
            out["wprime"].append(bundle.weights_wprime.data)
            out["logits"].append(np.stack([y_cls.data, y_coarse.data, y_fine.data], axis=1))
    return {k: np.concatenate(v) for k, v in out.items()}


def multilabel_accuracy(logits, labels) -> float:
    """Fraction of correct per-class presence decisions (mean logit of the three heads > 0)."""
    pred = np.asarray(logits).mean(axis=1) > 0
    return float(np.mean(pred == (np.asarray(labels) > 0.5)))


# ---------------------------------------------------------------------------
# CAM seeds
# ---------------------------------------------------------------------------

def normalize_cam(cam, label, size: int) -> np.ndarray:
    """Upsample to size x size and min-max normalize active channels; others are 0."""
    cam = np.asarray(cam, dtype=np.float64)
    active = np.asarray(label) > 0.5
    with no_grad():
        up = upsample_bilinear(Tensor(cam.astype(np.float32)), size, size).data.astype(np.float64)
    out = np.zeros_like(up)
    for c in np.flatnonzero(active):
        ch = up[..., c]
        lo, hi = ch.min(), ch.max()
        # flat maps (up to float32 interpolation round-off) carry no spatial signal
        if hi - lo > 1e-6 * max(1.0, abs(hi), abs(lo)):
            out[..., c] = (ch - lo) / (hi - lo)
        else:
            out[..., c] = 1.0 if hi > 0 else 0.0
    return out


def cam_to_seeds(cam_fine, label, seed_cfg: SeedConfig, size: int) -> np.ndarray:
    """Pixel pseudo-labels: 0 background, c + 1 for class c, IGNORE inside the band."""
    scores = normalize_cam(cam_fine, label, size)
    active = np.asarray(label) > 0.5
    seeds = np.zeros((size, size), dtype=np.uint8)
    if not active.any():
        return seeds
    masked = np.where(active, scores, -np.inf)
    best = masked.max(axis=-1)
    cls = masked.argmax(axis=-1)
    fg = best >= seed_cfg.background_threshold
    seeds[fg] = cls[fg] + 1
    if seed_cfg.ignore_band is not None:
        lo, hi = seed_cfg.ignore_band
        seeds[(best >= lo) & (best < hi)] = IGNORE
    return seeds


def seeds_from_cams(cams, labels, seed_cfg: SeedConfig, size: int) -> np.ndarray:
    return np.stack([cam_to_seeds(c, l, seed_cfg, size) for c, l in zip(cams, labels)])


def corrupt_seeds(seeds, fraction: float, num_classes: int, rng: np.random.Generator,
                  block: int = 8) -> np.ndarray:
    """Relabel a ``fraction`` of block x block cells per image to a different class."""
    seeds = np.array(seeds, copy=True)
    n, o, _ = seeds.shape
    cells = o // block
    for i in range(n):
        k = int(round(fraction * cells * cells))
        for cell in rng.choice(cells * cells, k, replace=False):
            r, c = divmod(int(cell), cells)
            view = seeds[i, r * block:(r + 1) * block, c * block:(c + 1) * block]
            shift = rng.integers(1, num_classes)
            keep = view != IGNORE
            view[keep] = (view[keep].astype(np.int64) + shift) % num_classes
    return seeds


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

class SegModel:
    """Encoder patch tokens -> gradient clipping decoder."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig):
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.encoder = VitEncoder(enc_cfg)
        self.decoder = SegDecoder(dec_cfg)

    def parameters(self) -> list:
        return self.encoder.parameters() + self.decoder.parameters()

    def __call__(self, images) -> Prediction:
        t_final, _ = self.encoder(images)
        return self.decoder(t_final[..., self.enc_cfg.num_classes:, :])

    def predict(self, images, batch_size: int = 32) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self(images[i:i + batch_size]).logits.data.argmax(axis=-1))
        return np.concatenate(out).astype(np.uint8)


def decoder_config_for(enc_cfg: EncoderConfig, **kw) -> DecoderConfig:
    base = dict(num_classes=enc_cfg.num_classes + 1, embed_dim=enc_cfg.embed_dim,
                heads=enc_cfg.heads, output_size=enc_cfg.image_size, seed=enc_cfg.seed)
    base.update(kw)
    return DecoderConfig(**base)


def clip_step(ce: np.ndarray, seeds: np.ndarray, dec_cfg: DecoderConfig, mode: str,
              gt: np.ndarray | None = None):
    """Per-image ClipReports and the (B, O, O) weight map of retained pixels."""
    valid = seeds != IGNORE
    if mode == "gt":
        keep = valid & (seeds == gt)
        return None, keep
    if mode == "none":
        return None, valid
    o, s, tau = dec_cfg.output_size, dec_cfg.grad_patch_size, dec_cfg.start_value
    reports = [clip_report(ce[i], s, tau, valid[i]) for i in range(len(ce))]
    if dec_cfg.gate == "batch":
        batch_lambda = float(np.mean([r.lambda_global for r in reports]))
        reports = [clip_report(ce[i], s, tau, valid[i], lambda_gate=batch_lambda)
                   for i in range(len(ce))]
    keep = np.stack([retained_pixels(r, o) for r in reports]) & valid
    return reports, keep


def retrain(cfg: TrainConfig, dec_cfg: DecoderConfig, train_samples, seeds,
            val_samples=None, encoder_source: VitEncoder | None = None,
            enc_cfg: EncoderConfig | None = None):
    """Train encoder + decoder on pixel seeds with per-step gradient clipping.

    Returns ``(model, report, steps)``: ``report`` evaluates ``val_samples``
    (None without them) and ``steps`` holds per-step diagnostics. Ground-truth
    masks of ``train_samples`` are read for diagnostics and, in ``"gt"`` clip
    mode only, to build the clipping mask.
    """
    images, _, gt = stack_split(train_samples)
    seeds = np.asarray(seeds)
    enc_cfg = enc_cfg or (encoder_source.cfg if encoder_source is not None else None)
    if enc_cfg is None:
        raise ValueError("need enc_cfg or encoder_source")
    model = SegModel(enc_cfg, dec_cfg)
    if encoder_source is not None:
        for dst, src in zip(model.encoder.parameters(), encoder_source.parameters()):
            dst.data = src.data.copy()
    groups = [ParamGroup(model.encoder.parameters(), cfg.encoder_lr_scale, cfg.weight_decay),
              ParamGroup(model.decoder.parameters(), 1.0, cfg.weight_decay)]
    opt = SGD(groups, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 20])
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    steps = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(images), cfg.batch_size, rng):
            if cfg.schedule == "polynomial":
                lr = cfg.base_lr * polynomial(step, total, cfg.poly_power)
            else:
                lr = cfg.base_lr * warmup_cosine(step, total, cfg.warmup_epochs * steps_per_epoch)
            opt.zero_grad()
            pred = model(images[idx])
            ce = per_pixel_ce(pred, seeds[idx])
            reports, keep = clip_step(ce.data, seeds[idx], dec_cfg, cfg.clip, gt[idx])
            count = int(keep.sum())
            loss = (ce * keep.astype(np.float32)).sum() * (1.0 / max(count, 1))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, value)
            loss.backward()
            opt.step(lr)
            steps.append(_step_record(step, lr, value, reports, keep, seeds[idx], gt[idx]))
            step += 1
        log.info("retrain epoch %d loss %.4f", epoch, steps[-1]["loss"])
    report = None
    if val_samples is not None:
        report = evaluate_model(model, val_samples)
    return model, report, steps


def _step_record(step, lr, loss, reports, keep, seeds, gt) -> dict:
    valid = seeds != IGNORE
    agree = (seeds == gt) & valid
    rec = {"step": step, "lr": float(lr), "loss": float(loss),
           "retained_fraction": float(keep.sum() / max(valid.sum(), 1)),
           "precision_all": float(agree.sum() / max(valid.sum(), 1)),
           "precision_retained": float((agree & keep).sum() / max(keep.sum(), 1))}
    if reports is not None:
        rec["lambda_global"] = float(np.mean([r.lambda_global for r in reports]))
        rec["gated"] = bool(all(r.gated for r in reports)) if reports else False
        rec["gated_fraction"] = float(np.mean([r.gated for r in reports]))
    else:
        rec["lambda_global"] = None
        rec["gated"] = False
        rec["gated_fraction"] = 0.0
    return rec


def evaluate_model(model: SegModel, samples) -> EvalReport:
    images, _, gt = stack_split(samples)
    return evaluate(model.predict(images), gt, model.dec_cfg.num_classes)


def evaluate_seeds(seeds, samples, num_classes: int) -> EvalReport:
    _, _, gt = stack_split(samples)
    return evaluate(seeds, gt, num_classes)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_cam_model(model: WeakTrCam, directory) -> None:
    config = {"encoder": model.cfg.to_dict(), "aaf": asdict(model.aaf_cfg), "fusion": model.fusion}
    params = model.encoder.parameters() + [model.conv_weight, model.conv_bias]
    params += model.cls_head.parameters() + model.aaf.parameters()
    serialization.save_checkpoint(directory, params, config, kind="cam")


def load_cam_model(directory) -> WeakTrCam:
    manifest = serialization.load_manifest(directory)
    if manifest["kind"] != "cam":
        raise serialization.FormatError(f"{directory} holds a {manifest['kind']!r} checkpoint")
    cfg = manifest["config"]
    model = WeakTrCam(EncoderConfig(**cfg["encoder"]), AafConfig(**cfg["aaf"]), cfg["fusion"])
    params = model.encoder.parameters() + [model.conv_weight, model.conv_bias]
    params += model.cls_head.parameters() + model.aaf.parameters()
    serialization.load_parameters(directory, params)
    return model


def save_seg_model(model: SegModel, directory) -> None:
    config = {"encoder": model.enc_cfg.to_dict(), "decoder": model.dec_cfg.to_dict()}
    serialization.save_checkpoint(directory, model.parameters(), config, kind="seg")


def load_seg_model(directory) -> SegModel:
    manifest = serialization.load_manifest(directory)
    if manifest["kind"] != "seg":
        raise serialization.FormatError(f"{directory} holds a {manifest['kind']!r} checkpoint")
    cfg = manifest["config"]
    model = SegModel(EncoderConfig(**cfg["encoder"]), DecoderConfig(**cfg["decoder"]))
    serialization.load_parameters(directory, model.parameters())
    return model
