"""``weaktr`` command-line interface.

Subcommands mirror the pipeline stages::

    weaktr gen-data          --out DIR --count N --seed S --classes C --size O
    weaktr train-cam         --data DIR --config FILE --out CKPT
    weaktr export-cam        --ckpt CKPT --data DIR --out DIR
    weaktr retrain           --data DIR --seeds DIR --config FILE --out CKPT
                             [--no-clip] [--gt-clip] [--tau F] [--patch S]
    weaktr eval              --ckpt CKPT --data DIR --report out.json
    weaktr inspect-attention --ckpt CKPT --image FILE --out DIR
    weaktr inspect-clip      --ckpt CKPT --data DIR --seeds DIR --out DIR

Config files are JSON objects with optional sections ``"encoder"``,
``"train"``, ``"aaf"``, ``"seeds"`` and ``"decoder"``; each section holds
keyword overrides for the matching config dataclass. Reports are JSON, loss
curves CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import serialization as ser
from .cam import AafConfig
from .decoder import IGNORE, clip_report, per_pixel_ce
from .numerics import no_grad
from .synthetic import DataConfig, generate_split, load_dataset, save_dataset, stack_split
from .training import (SeedConfig, TrainConfig, cam_to_seeds, compute_cams, decoder_config_for,
                       evaluate_model, evaluate_seeds, load_cam_model, load_seg_model, retrain,
                       save_cam_model, save_seg_model, train_cam)
from .vit import EncoderConfig, extract_cross_attention, extract_patch_attention

log = logging.getLogger("weaktr")


def _read_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise SystemExit(f"config {path} must hold a JSON object")
    return cfg


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _encoder_config(cfg: dict, data_cfg: DataConfig) -> EncoderConfig:
    base = {"image_size": data_cfg.image_size, "num_classes": data_cfg.num_classes}
    base.update(cfg.get("encoder", {}))
    return EncoderConfig(**base)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = DataConfig(image_size=args.size, num_classes=args.classes, seed=args.seed)
    samples = generate_split(args.split, args.count, args.seed, cfg)
    save_dataset(args.out, samples, cfg, {"split": args.split, "base_seed": args.seed})
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train_cam(args) -> int:
    samples, data_cfg = load_dataset(args.data)
    cfg = _read_config(args.config)
    enc_cfg = _encoder_config(cfg, data_cfg)
    tcfg = TrainConfig(**cfg.get("train", {}))
    model, curve = train_cam(tcfg, samples, enc_cfg, AafConfig(**cfg.get("aaf", {})))
    save_cam_model(model, args.out)
    rows = [{"epoch": i, "loss": l, "l_cls": p[0], "l_coarse": p[1], "l_fine": p[2]}
            for i, (l, p) in enumerate(zip(curve["epoch_loss"], curve["epoch_parts"]))]
    _write_csv(Path(args.out) / "curve.csv", rows)
    print(f"final loss {curve['epoch_loss'][-1]:.4f}; checkpoint in {args.out}")
    return 0


def cmd_export_cam(args) -> int:
    model = load_cam_model(args.ckpt)
    samples, data_cfg = load_dataset(args.data)
    seed_cfg = SeedConfig(**_read_config(args.config).get("seeds", {}))
    images, labels, _ = stack_split(samples)
    cams = compute_cams(model, images)
    out = Path(args.out)
    seeds = []
    for i, (cam, label) in enumerate(zip(cams["cam_fine"], labels)):
        ser.write_tensor(out / "cams" / f"{i:04d}.wtt", cam)
        for c in range(cam.shape[-1]):
            ser.write_pgm(out / "heatmaps" / f"{i:04d}_c{c}.pgm", ser.heatmap_u8(cam[..., c]))
        s = cam_to_seeds(cam, label, seed_cfg, data_cfg.image_size)
        ser.write_tensor(out / "seeds" / f"{i:04d}.wtt", s)
        seeds.append(s)
    report = evaluate_seeds(np.stack(seeds), samples, data_cfg.num_classes + 1)
    _write_json(out / "seed_report.json", report.to_dict())
    print(f"exported {len(samples)} CAMs; seed mIoU {report.miou:.4f}")
    return 0


def _load_seeds(directory, count: int) -> np.ndarray:
    directory = Path(directory)
    if (directory / "seeds").is_dir():
        directory = directory / "seeds"
    return np.stack([ser.read_tensor(directory / f"{i:04d}.wtt") for i in range(count)]).astype(np.uint8)


def cmd_retrain(args) -> int:
    samples, data_cfg = load_dataset(args.data)
    cfg = _read_config(args.config)
    seeds = _load_seeds(args.seeds, len(samples))
    enc_cfg = _encoder_config(cfg, data_cfg)
    train_kw = dict(cfg.get("train", {}))
    if args.no_clip and args.gt_clip:
        raise SystemExit("--no-clip and --gt-clip are mutually exclusive")
    if args.no_clip:
        train_kw["clip"] = "none"
    if args.gt_clip:
        train_kw["clip"] = "gt"
    tcfg = TrainConfig.retraining(**train_kw)
    dec_kw = dict(cfg.get("decoder", {}))
    if args.tau is not None:
        dec_kw["start_value"] = args.tau
    if args.patch is not None:
        dec_kw["grad_patch_size"] = args.patch
    dec_cfg = decoder_config_for(enc_cfg, **dec_kw)
    source = load_cam_model(args.init).encoder if args.init else None
    val = load_dataset(args.val)[0] if args.val else None
    model, report, steps = retrain(tcfg, dec_cfg, samples, seeds, val, source, enc_cfg)
    save_seg_model(model, args.out)
    _write_csv(Path(args.out) / "curve.csv", steps)
    if report is not None:
        _write_json(Path(args.out) / "val_report.json", report.to_dict())
        print(f"val mIoU {report.miou:.4f}")
    print(f"checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    samples, _ = load_dataset(args.data)
    model = load_seg_model(args.ckpt)
    report = evaluate_model(model, samples)
    _write_json(args.report, report.to_dict())
    print(f"mIoU {report.miou:.4f} precision {report.precision:.4f} recall {report.recall:.4f}")
    return 0


def cmd_inspect_attention(args) -> int:
    model = load_cam_model(args.ckpt)
    image = ser.read_tensor(args.image)
    cfg = model.cfg
    out = Path(args.out)
    with no_grad():
        bundle, _ = model.forward(image)
        _, stack = model.encoder(image)
    ca = extract_cross_attention(stack, cfg).data
    pa = extract_patch_attention(stack, cfg).data
    for h in range(cfg.num_maps):
        for c in range(cfg.num_classes):
            ser.write_pgm(out / f"ca_h{h}_c{c}.pgm", ser.heatmap_u8(ca[h, ..., c]))
        ser.write_pgm(out / f"pa_h{h}.pgm", ser.heatmap_u8(pa[h]))
    for name in ("cam_coarse", "cam_fine"):
        cam = getattr(bundle, name).data
        ser.write_tensor(out / f"{name}.wtt", cam)
        for c in range(cfg.num_classes):
            ser.write_pgm(out / f"{name}_c{c}.pgm", ser.heatmap_u8(cam[..., c]))
    rows = [{"head": h, "layer": h // cfg.heads, "w": float(bundle.weights_w.data[h]),
             "w_prime": float(bundle.weights_wprime.data[h])} for h in range(cfg.num_maps)]
    _write_csv(out / "head_weights.csv", rows)
    print(f"wrote attention maps for {cfg.num_maps} heads to {out}")
    return 0


def cmd_inspect_clip(args) -> int:
    model = load_seg_model(args.ckpt)
    samples, _ = load_dataset(args.data)
    seeds = _load_seeds(args.seeds, len(samples))
    dec = model.dec_cfg
    tau = dec.start_value if args.tau is None else args.tau
    patch = dec.grad_patch_size if args.patch is None else args.patch
    out = Path(args.out)
    rows = []
    idx = range(min(args.count, len(samples)))
    for i in idx:
        with no_grad():
            ce = per_pixel_ce(model(samples[i].image), seeds[i]).data
        rep = clip_report(ce, patch, tau, seeds[i] != IGNORE)
        for t, mask in enumerate(rep.masks):
            ser.write_pgm(out / f"{i:04d}_tile{t:02d}.pgm", mask * 255)
        keep = np.zeros_like(ce)
        l = dec.output_size // patch
        for t, mask in enumerate(rep.masks):
            r, c = divmod(t, l)
            keep[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = mask
        ser.write_pgm(out / f"{i:04d}_mask.pgm", keep * 255)
        for t, lam in enumerate(rep.lambda_i):
            rows.append({"image": i, "tile": t, "lambda_i": float(lam),
                         "lambda_global": rep.lambda_global, "gated": rep.gated})
    _write_csv(out / "lambda.csv", rows)
    print(f"wrote clip masks for {len(idx)} images to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weaktr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--split", default="train", help="split name mixed into per-sample seeds")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-cam", help="phase 1: train the CAM model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_cam)

    e = sub.add_parser("export-cam", help="write fine CAMs, heatmaps and seed maps")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="optional JSON with a 'seeds' section")
    e.set_defaults(func=cmd_export_cam)

    r = sub.add_parser("retrain", help="phase 2: online retraining on seed maps")
    r.add_argument("--data", required=True)
    r.add_argument("--seeds", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--no-clip", action="store_true", help="naive decoder (no clipping)")
    r.add_argument("--gt-clip", action="store_true", help="clip with ground truth (upper bound)")
    r.add_argument("--tau", type=float, help="clipping start value")
    r.add_argument("--patch", type=int, help="gradient patch size S")
    r.add_argument("--init", help="CAM checkpoint whose encoder initializes retraining")
    r.add_argument("--val", help="dataset directory evaluated after training")
    r.set_defaults(func=cmd_retrain)

    v = sub.add_parser("eval", help="evaluate a segmentation checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("inspect-attention", help="dump CA/PA maps and head weights for one image")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--image", required=True, help="WTT1 image file (O x O x 3)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_inspect_attention)

    c = sub.add_parser("inspect-clip", help="dump clipping masks (PGM) and lambdas (CSV)")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--seeds", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--tau", type=float)
    c.add_argument("--patch", type=int)
    c.add_argument("--count", type=int, default=4, help="number of images to inspect")
    c.set_defaults(func=cmd_inspect_clip)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
