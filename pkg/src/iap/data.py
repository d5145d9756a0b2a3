"""Datasets, image codecs and result files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

RECORD_BYTES = 3073
CIFAR_SIDE = 32

SHAPE_CLASSES = (
    "disk", "square", "triangle", "ring", "plus",
    "hstripes", "vstripes", "diamond", "xcross", "twodots",
)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    id: str


def stack(items: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    if not items:
        return np.zeros((0, CIFAR_SIDE, CIFAR_SIDE, 3), np.float32), np.zeros((0,), np.int64)
    return np.stack([it.image for it in items]), np.array([it.label for it in items], dtype=np.int64)


# -- CIFAR-10 binary -----------------------------------------------------------------


def load_cifar10_binary(path, max_label: int = 9) -> Iterator[LabeledImage]:
    """Yield records of a CIFAR-10 binary batch: label byte + R, G, B 32x32 planes."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) % RECORD_BYTES:
        raise DataError(f"{path}: length {len(data)} is not a multiple of {RECORD_BYTES} (truncated file?)")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    for i, rec in enumerate(raw):
        label = int(rec[0])
        if label > max_label:
            raise DataError(f"{path}: record {i} has label byte {label} > {max_label}")
        img = rec[1:].reshape(3, CIFAR_SIDE, CIFAR_SIDE).transpose(1, 2, 0).astype(np.float32) / 255.0
        yield LabeledImage(img, label, f"{path.stem}_{i:05d}")


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to u8, rounding half up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_cifar10_binary(items: Iterable[LabeledImage], path) -> None:
    chunks = []
    for it in items:
        if it.image.shape != (CIFAR_SIDE, CIFAR_SIDE, 3):
            raise DataError(f"{it.id}: CIFAR records must be 32x32x3, got {it.image.shape}")
        chunks.append(bytes([it.label]) + to_bytes(it.image).transpose(2, 0, 1).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_cifar10_dir(path) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """``data_batch_*.bin`` as train split, ``test_batch.bin`` as test split."""
    path = Path(path)
    batches = sorted(path.glob("data_batch_*.bin"))
    test = path / "test_batch.bin"
    if not batches or not test.exists():
        raise DataError(f"{path}: expected data_batch_*.bin and test_batch.bin")
    train_items = [it for b in batches for it in load_cifar10_binary(b)]
    return train_items, list(load_cifar10_binary(test))


# -- synthetic textured shapes ---------------------------------------------------------


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    t = max(1.5, r * 0.35)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - t)
    if kind == "plus":
        return ((np.abs(dy) <= t / 2) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t / 2) & (np.abs(dy) <= r))
    if kind == "hstripes":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor((dy + r) / 2.5) % 2 == 0)
    if kind == "vstripes":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor((dx + r) / 2.5) % 2 == 0)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "xcross":
        return ((np.abs(dy - dx) <= t * 0.7) | (np.abs(dy + dx) <= t * 0.7)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "twodots":
        rr = r * 0.45
        off = r * 0.55
        return ((dy**2 + (dx - off) ** 2) <= rr**2) | ((dy**2 + (dx + off) ** 2) <= rr**2)
    raise ValueError(kind)


def synthetic_image(label: int, rng: np.random.Generator, size: int = CIFAR_SIDE) -> np.ndarray:
    """One colored-shape image of class ``label`` (u8-quantized floats).

    The background is a smooth two-color ramp with faint noise; the object is
    filled with strong multi-scale texture. The mix of smooth and busy areas
    mirrors natural photographs.
    """
    kind = SHAPE_CLASSES[label]
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) + 0.5)[..., None]
    bg = c0 * (1 - ramp) + c1 * ramp
    bg = bg + rng.uniform(-1, 1, size=(size, size, 3)) * rng.uniform(0.01, 0.03)
    fg_color = rng.uniform(0.2, 0.8, size=3)
    while np.abs(fg_color - bg.mean(axis=(0, 1))).max() < 0.3:
        fg_color = rng.uniform(0.2, 0.8, size=3)
    r = rng.uniform(size * 0.22, size * 0.34)
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    mask = _shape_mask(kind, size, cy, cx, r, rng)[..., None]
    fine = rng.uniform(-1, 1, size=(size, size, 1)) * rng.uniform(0.10, 0.20)
    coarse = rng.uniform(-1, 1, size=(size // 4, size // 4, 1)).repeat(4, 0).repeat(4, 1) * 0.08
    tint = rng.uniform(-1, 1, size=(size, size, 3)) * 0.04
    fg = fg_color * (1 + fine + coarse) + tint
    img = np.where(mask, fg, bg)
    img = np.clip(img, 2 / 255, 253 / 255)
    return to_bytes(img).astype(np.float32) / 255.0


def synthetic_dataset(n: int, seed: int, prefix: str = "syn") -> list[LabeledImage]:
    """Balanced, seeded dataset over the ten shape classes."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    rng.shuffle(labels)
    return [LabeledImage(synthetic_image(int(lab), rng), int(lab), f"{prefix}_{i:05d}") for i, lab in enumerate(labels)]


def synthetic_splits(n_train: int = 4000, n_test: int = 1000, seed: int = 0):
    return synthetic_dataset(n_train, seed, "train"), synthetic_dataset(n_test, seed + 1, "test")


# -- portable pixmaps ----------------------------------------------------------------------


def write_image_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (H,W,3) image, got {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(image).tobytes())


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: malformed header {tokens!r}") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h, pos + 1


def read_image_ppm(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, off = _read_header(data, b"P6", path)
    if shape is not None and (h, w) != tuple(shape):
        raise DataError(f"{path}: expected {shape[0]}x{shape[1]}, file is {h}x{w}")
    payload = data[off:]
    if len(payload) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def write_map_pgm(values: np.ndarray, path) -> None:
    """Debug dump of a scalar field, min-max scaled to 8-bit graymap."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    h, w = v.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(scaled).tobytes())


# -- result records and reports ----------------------------------------------------------------


@dataclass
class ResultRecord:
    id: str
    anchor_row: int
    anchor_col: int
    success: bool
    confidence: float
    iterations: int
    reinits: int
    ssim_local: float | None = None
    ssim_global: float | None = None
    uiq_local: float | None = None
    uiq_global: float | None = None
    sre_local: float | None = None
    sre_global: float | None = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


METRIC_FIELDS = ("confidence", "ssim_local", "ssim_global", "uiq_local", "uiq_global", "sre_local", "sre_global")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, text: str):
    if text == "":
        return None
    if name == "id":
        return text
    if name == "success":
        return text == "1"
    if name in ("anchor_row", "anchor_col", "iterations", "reinits"):
        return int(text)
    return float(text)


def aggregate(records: Sequence[ResultRecord]) -> dict | None:
    """Mean/std (population) per metric plus ASR; ``None`` for an empty set."""
    if not records:
        return None
    out: dict = {"n": len(records), "asr": sum(r.success for r in records) / len(records)}
    for name in METRIC_FIELDS:
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        if vals:
            arr = np.array(vals, dtype=np.float64)
            out[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
        else:
            out[name] = None
    return out


def write_report(records: Sequence[ResultRecord], directory, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``report.csv`` (one row per record) and ``report.json`` (aggregates)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(ResultRecord.field_names())
        for rec in records:
            writer.writerow([_fmt(getattr(rec, n)) for n in ResultRecord.field_names()])
        csv_path = directory / "report.csv"
        csv_path.write_text(buf.getvalue(), encoding="utf-8", newline="")
        payload = {"aggregates": aggregate(records)}
        if extra:
            payload.update(extra)
        json_path = directory / "report.json"
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report under {directory}: {exc}") from exc
    return csv_path, json_path


def read_report_csv(path) -> list[ResultRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [ResultRecord(**{k: _parse(k, v) for k, v in row.items()}) for row in reader]


def record_to_json(rec: ResultRecord) -> str:
    return json.dumps(asdict(rec), sort_keys=True)


def finite_or_none(x) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)
