"""WTT1 tensor files, PGM heatmaps and parameter checkpoints.

WTT1 layout: the magic bytes ``WTT1``, a little-endian u32 rank, ``rank``
little-endian u64 dimensions, then the float32 payload in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"WTT1"


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, shape {dims} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array) -> None:
    _atomic_write(Path(path), encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM (P5) from a 2-D array of values in [0, 255]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    _atomic_write(Path(path), f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def heatmap_u8(values) -> np.ndarray:
    """Min-max normalize a map to 0..255; constant maps become zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def save_checkpoint(directory, params, config: dict, kind: str) -> None:
    """Write each named parameter as a WTT1 file plus ``manifest.json``.

    The manifest maps parameter name to file name and embeds ``config``. It is
    written last, so a directory with a manifest always has every tensor.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, p in enumerate(params):
        fname = f"p{i:04d}.wtt"
        write_tensor(directory / fname, p.data)
        files[p.name] = fname
    manifest = {"format": "WTT1", "kind": kind, "config": config, "parameters": files}
    _atomic_write(directory / "manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


def load_parameters(directory, params) -> None:
    """Fill ``params`` in place from a checkpoint directory (matched by name)."""
    directory = Path(directory)
    files = load_manifest(directory)["parameters"]
    for p in params:
        if p.name not in files:
            raise FormatError(f"checkpoint lacks parameter {p.name!r}")
        value = read_tensor(directory / files[p.name])
        if value.shape != p.shape:
            raise FormatError(f"{p.name}: stored shape {value.shape} != {p.shape}")
        p.data = value.astype(p.data.dtype)
