"""Procedural multi-label shape images with pixel-exact masks.

Every sample draws from its own Philox stream keyed by a 64-bit seed, so
samples are independent of generation order. Shapes are rendered with 4x4
supersampling: the image blends by coverage, the mask takes the majority.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .serialization import read_tensor, write_tensor

SHAPE_KINDS = ("disk", "square", "triangle", "ring")

# base fill colour per class; a small jitter is added per shape
CLASS_COLORS = np.array([
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
])

SUPERSAMPLE = 4
MIN_COVERAGE, MAX_COVERAGE = 0.01, 0.40


@dataclass
class DataConfig:
    image_size: int = 64
    num_classes: int = 4
    shapes_per_image: tuple = (1, 3)
    scale_range: tuple = (0.25, 0.5)    # shape diameter as a fraction of the image size
    noise_std: float = 0.04
    color_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_image = tuple(self.shapes_per_image)
        self.scale_range = tuple(self.scale_range)
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi or hi > self.num_classes:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image} for {self.num_classes} classes")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not 1 <= self.num_classes <= len(SHAPE_KINDS):
            raise ValueError(f"num_classes must be in [1, {len(SHAPE_KINDS)}]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray     # (O, O, 3) float32 in [0, 1]
    label: np.ndarray     # (C,) float32 multi-hot
    gt_mask: np.ndarray   # (O, O) uint8, 0 = background, c + 1 = class c
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _coverage(kind: str, cx: float, cy: float, r: float, angle: float, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape (pixel units, y down)."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    y, x = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = x - cx, y - cy
    if kind == "disk":
        inside = dx * dx + dy * dy <= r * r
    elif kind == "ring":
        d2 = dx * dx + dy * dy
        inside = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif kind == "square":
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        half = r / np.sqrt(2.0) * 1.15
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    elif kind == "triangle":
        inside = np.ones_like(dx, dtype=bool)
        for k in range(3):
            # each edge at distance r/2 from the centre, outward normals 120 degrees apart
            a = angle + 2.0 * np.pi * k / 3.0
            inside &= np.cos(a) * dx + np.sin(a) * dy <= 0.5 * r
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _draw_shapes(rng: np.random.Generator, cfg: DataConfig):
    o = cfg.image_size
    lo, hi = cfg.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    classes = rng.permutation(cfg.num_classes)[:count]
    shapes = []
    for c in classes:
        r = float(rng.uniform(*cfg.scale_range)) * o / 2.0
        cx = float(rng.uniform(r * 0.6, o - r * 0.6))
        cy = float(rng.uniform(r * 0.6, o - r * 0.6))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        color = np.clip(CLASS_COLORS[c] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        shapes.append((int(c), cx, cy, r, angle, color))
    return shapes


def _compose(shapes, size: int):
    mask = np.zeros((size, size), dtype=np.uint8)
    covers = []
    for c, cx, cy, r, angle, color in shapes:
        cov = _coverage(SHAPE_KINDS[c], cx, cy, r, angle, size)
        covers.append(cov)
        mask[cov >= 0.5] = c + 1
    return mask, covers


def _acceptable(shapes, mask: np.ndarray) -> bool:
    total = mask.size
    for c, *_ in shapes:
        frac = np.count_nonzero(mask == c + 1) / total
        if not MIN_COVERAGE <= frac <= MAX_COVERAGE:
            return False
    return True


def generate_sample(seed: int, cfg: DataConfig, max_tries: int = 64) -> Sample:
    """Render one sample from a counter-based stream keyed by ``seed``.

    Draws are repeated (on the same stream) until every shape stays visible
    after occlusion and covers between 1% and 40% of the image.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2 ** 64 - 1)))
    o = cfg.image_size
    for _ in range(max_tries):
        shapes = _draw_shapes(rng, cfg)
        mask, covers = _compose(shapes, o)
        if _acceptable(shapes, mask):
            break
    else:
        raise RuntimeError(f"could not place shapes for seed {seed} after {max_tries} tries")

    g0, g1 = rng.uniform(0.25, 0.6, 3), rng.uniform(0.25, 0.6, 3)
    t = np.linspace(0.0, 1.0, o)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.clip(0.5 + 0.5 * (np.cos(angle) * (t[None, :] - 0.5) + np.sin(angle) * (t[:, None] - 0.5)) * 2.0, 0, 1)
    img = g0 + (g1 - g0) * ramp[..., None]
    for (c, cx, cy, r, ang, color), cov in zip(shapes, covers):
        img = img * (1.0 - cov[..., None]) + color * cov[..., None]
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    label = np.zeros(cfg.num_classes, dtype=np.float32)
    for c, *_ in shapes:
        label[c] = 1.0
    return Sample(img, label, mask, int(seed), {"classes": [s[0] for s in shapes]})


def split_seed(base_seed: int, name: str, index: int) -> int:
    digest = hashlib.blake2b(f"{base_seed}/{name}/{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generate_split(name: str, count: int, base_seed: int, cfg: DataConfig) -> list:
    return [generate_sample(split_seed(base_seed, name, i), cfg) for i in range(count)]


def stack_split(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images, labels, masks) arrays for a list of samples."""
    return (np.stack([s.image for s in samples]),
            np.stack([s.label for s in samples]),
            np.stack([s.gt_mask for s in samples]))


# ---------------------------------------------------------------------------
# dataset directories: images/XXXX.wtt, masks/XXXX.wtt, labels.csv, config.json
# ---------------------------------------------------------------------------

def save_dataset(directory, samples, cfg: DataConfig, extra: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_tensor(directory / "images" / f"{i:04d}.wtt", s.image)
        write_tensor(directory / "masks" / f"{i:04d}.wtt", s.gt_mask)
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"class_{c}" for c in range(cfg.num_classes)] + ["seed"])
        for i, s in enumerate(samples):
            w.writerow([i] + [int(v) for v in s.label] + [s.seed])
    meta = {"data": cfg.to_dict(), "count": len(samples)}
    meta.update(extra or {})
    (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(directory) -> tuple[list, DataConfig]:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    cfg = DataConfig(**meta["data"])
    samples = []
    with open(directory / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        i = int(row[0])
        label = np.array([float(v) for v in row[1:1 + cfg.num_classes]], dtype=np.float32)
        image = read_tensor(directory / "images" / f"{i:04d}.wtt")
        mask = read_tensor(directory / "masks" / f"{i:04d}.wtt").astype(np.uint8)
        samples.append(Sample(image, label, mask, int(row[-1])))
    return samples, cfg
