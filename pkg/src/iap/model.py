"""Victim CNN: construction, SGD training, inference, Grad-CAM and weight files."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import (
    DTYPE,
    EngineError,
    Layer,
    backward_params,
    backward_to_layer,
    forward,
    last_conv_index,
    softmax,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

MAGIC = b"IAPW"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass
class VictimModel:
    layers: list[Layer]
    class_count: int
    last_conv_index: int
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.last_conv_index < len(self.layers) or self.layers[self.last_conv_index].kind != "conv3x3":
            raise EngineError(f"last_conv_index {self.last_conv_index} does not point at a conv3x3 layer")
        heads = [layer for layer in self.layers if layer.kind == "dense"]
        if self.layers[-1].kind != "dense" or len(heads) != 1 or heads[0].weight.shape[1] != self.class_count:
            raise EngineError(f"model needs exactly one dense output head of width {self.class_count}")
        if not self.label_names:
            self.label_names = [str(i) for i in range(self.class_count)]

    @property
    def input_channels(self) -> int:
        return self.layers[0].weight.shape[2]

    def parameter_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params)

    def logits(self, images: np.ndarray) -> np.ndarray:
        return forward(self.layers, images)[0]

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        return softmax(self.logits(images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=-1)

    def copy(self) -> "VictimModel":
        layers = [Layer(l.kind, None if l.weight is None else l.weight.copy(), None if l.bias is None else l.bias.copy())
                  for l in self.layers]
        return VictimModel(layers, self.class_count, self.last_conv_index, list(self.label_names))

    def equals(self, other: "VictimModel") -> bool:
        """Bitwise equality of architecture and parameters."""
        if len(self.layers) != len(other.layers) or self.class_count != other.class_count:
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind or len(a.params) != len(b.params):
                return False
            for pa, pb in zip(a.params, b.params):
                if pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                    return False
        return True


def build_default_model(class_count: int = 10, seed: int = 0, in_channels: int = 3) -> VictimModel:
    """conv(3->32) relu conv(32->32) relu pool conv(32->64) relu conv(64->64) relu pool flatten dense.

    The dense head is sized for 32x32 inputs (8x8x64 features).
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    rng = np.random.default_rng(seed)
    layers = [
        Layer.conv3x3(in_channels, 32, rng), Layer("relu"),
        Layer.conv3x3(32, 32, rng), Layer("relu"),
        Layer("maxpool2"),
        Layer.conv3x3(32, 64, rng), Layer("relu"),
        Layer.conv3x3(64, 64, rng), Layer("relu"),
        Layer("maxpool2"),
        Layer("flatten"),
        Layer.dense(8 * 8 * 64, class_count, rng),
    ]
    return VictimModel(layers, class_count, last_conv_index(layers))


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 64
    seed: int = 42


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)


def accuracy(model: VictimModel, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    if len(images) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(images), batch):
        correct += int((model.predict(images[start : start + batch]) == labels[start : start + batch]).sum())
    return correct / len(images)


def train(
    model: VictimModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig | None = None,
    test_images: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
) -> tuple[VictimModel, TrainHistory]:
    """Minibatch SGD with classical momentum (``v = m*v - lr*g; w += v``).

    Returns a trained copy; ``model`` itself is left untouched.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise TrainingError("empty training set")
    if len(images) != len(labels):
        raise TrainingError(f"{len(images)} images but {len(labels)} labels")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    velocity = [[np.zeros_like(p) for p in layer.params] for layer in model.layers]
    history = TrainHistory()
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        for start in range(0, len(images), config.batch):
            idx = order[start : start + config.batch]
            logits, cache = forward(model.layers, images[idx])
            loss, grad = softmax_cross_entropy(logits, labels[idx])
            mean_loss = float(loss.mean())
            if not np.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss {mean_loss} at epoch {epoch}, batch starting {start}")
            grads = backward_params(model.layers, cache, grad / len(idx))
            for layer, vel, lgrads in zip(model.layers, velocity, grads):
                if lgrads is None:
                    continue
                for p, v, g in zip(layer.params, vel, lgrads):
                    v *= config.momentum
                    v -= config.lr * g
                    p += v
            total += mean_loss * len(idx)
            seen += len(idx)
        history.train_loss.append(total / seen)
        if test_images is not None and test_labels is not None:
            history.test_accuracy.append(accuracy(model, test_images, test_labels))
        log.info(
            "epoch %d/%d loss %.4f test acc %s", epoch + 1, config.epochs, history.train_loss[-1],
            f"{history.test_accuracy[-1]:.4f}" if history.test_accuracy else "n/a",
        )
    return model, history


# -- inference and saliency -----------------------------------------------------


def predict_confidence(model: VictimModel, image: np.ndarray, class_index: int) -> float:
    if not 0 <= class_index < model.class_count:
        raise EngineError(f"class index {class_index} out of range for {model.class_count} classes")
    return float(model.probabilities(image)[..., class_index])


@dataclass
class ClassLocalizationMap:
    values: np.ndarray  # (u, v) at feature-map resolution
    upsampled: np.ndarray  # (H, W) at image resolution
    weights: np.ndarray  # per-channel alpha


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel-centre bilinear weights, edges clamped
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_map(values: np.ndarray, shape: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    u, v = values.shape
    if mode == "nearest":
        rows = np.arange(shape[0]) * u // shape[0]
        cols = np.arange(shape[1]) * v // shape[1]
        return values[np.ix_(rows, cols)].astype(DTYPE)
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    out = _interp_matrix(shape[0], u) @ values.astype(np.float64) @ _interp_matrix(shape[1], v).T
    return out.astype(DTYPE)


def grad_cam(model: VictimModel, image: np.ndarray, class_index: int, mode: str = "bilinear") -> ClassLocalizationMap:
    """Grad-CAM of the pre-softmax logit ``class_index`` at the last conv layer."""
    if not 0 <= class_index < model.class_count:
        raise EngineError(f"class index {class_index} out of range for {model.class_count} classes")
    image = np.asarray(image, dtype=DTYPE)
    logits, cache = forward(model.layers, image)
    upstream = np.zeros_like(logits)
    upstream[..., class_index] = 1.0
    k = model.last_conv_index
    grads = backward_to_layer(model.layers, cache, upstream, k)
    feats = cache.outputs[k][0]
    alpha = grads.mean(axis=(0, 1))
    values = np.maximum((feats * alpha).sum(axis=-1), 0).astype(DTYPE)
    return ClassLocalizationMap(values, resize_map(values, image.shape[:2], mode), alpha)


def attention_argmax(cam: ClassLocalizationMap) -> tuple[int, int]:
    """Image-resolution argmax; ties go to the smallest row, then column."""
    flat = int(np.argmax(cam.upsampled))
    return divmod(flat, cam.upsampled.shape[1])


# -- weight file ------------------------------------------------------------------


def _records(model: VictimModel):
    for i, layer in enumerate(model.layers):
        if layer.weight is None:
            yield f"{i}.{layer.kind}", np.zeros((0,), dtype=DTYPE)
        else:
            yield f"{i}.{layer.kind}.weight", layer.weight
            yield f"{i}.{layer.kind}.bias", layer.bias


def save_weights(model: VictimModel, path) -> None:
    records = list(_records(model))
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(records))
    for name, arr in records:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path, label_names: Sequence[str] | None = None) -> VictimModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightFileError(f"{path}: unsupported version {version}")
        off = 12
        layers: list[Layer] = []
        pending: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2 : off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (rank,) = struct.unpack_from("<B", data, off)
            dims = struct.unpack_from(f"<{rank}I", data, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(DTYPE)
            off += 4 * size
            parts = name.split(".")
            idx, kind = int(parts[0]), parts[1]
            if len(parts) == 2:
                layers.append(Layer(kind))
            else:
                pending[parts[2]] = arr
                if "weight" in pending and "bias" in pending:
                    layers.append(Layer(kind, pending.pop("weight"), pending.pop("bias")))
            if len(layers) != idx + 1 and not pending:
                raise WeightFileError(f"{path}: record {name!r} out of order")
        if off != len(data):
            raise WeightFileError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightFileError(f"{path}: malformed weight file ({exc})") from exc
    class_count = layers[-1].weight.shape[1]
    return VictimModel(layers, class_count, last_conv_index(layers), list(label_names or []))
