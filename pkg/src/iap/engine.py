"""Small differentiable tensor engine for the victim CNN.

Tensors are plain float32 numpy arrays in NHWC layout. A model is a sequence
of :class:`Layer` objects; :func:`forward` runs them in order and records each
layer's output, and the backward functions walk that record in reverse using
hand-derived per-layer derivatives. Single images (rank 3) are accepted
everywhere and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DTYPE = np.float32

KINDS = ("conv3x3", "relu", "maxpool2", "dense", "flatten")


class EngineError(ValueError):
    """Raised when tensors and layers disagree (shape, index, cache)."""

    def __init__(self, message: str, layer_index: int | None = None, kind: str | None = None):
        if layer_index is not None:
            message = f"layer {layer_index} ({kind}): {message}"
        super().__init__(message)
        self.layer_index = layer_index
        self.kind = kind


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EngineError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "dense"):
            if self.weight is None or self.bias is None:
                raise EngineError(f"{self.kind} needs weight and bias")
            self.weight = np.asarray(self.weight, dtype=DTYPE)
            self.bias = np.asarray(self.bias, dtype=DTYPE)
            if self.kind == "conv3x3":
                if self.weight.ndim != 4 or self.weight.shape[:2] != (3, 3):
                    raise EngineError(f"conv3x3 weight must be (3, 3, cin, cout), got {self.weight.shape}")
            elif self.weight.ndim != 2:
                raise EngineError(f"dense weight must be (in, out), got {self.weight.shape}")
            if self.bias.shape != (self.weight.shape[-1],):
                raise EngineError(
                    f"{self.kind} bias shape {self.bias.shape} does not match {self.weight.shape[-1]} outputs"
                )
        elif self.weight is not None or self.bias is not None:
            raise EngineError(f"{self.kind} takes no parameters")

    @property
    def params(self) -> list[np.ndarray]:
        return [] if self.weight is None else [self.weight, self.bias]

    @classmethod
    def conv3x3(cls, cin: int, cout: int, rng: np.random.Generator) -> "Layer":
        limit = np.sqrt(6.0 / (9 * cin + 9 * cout))
        w = rng.uniform(-limit, limit, size=(3, 3, cin, cout))
        return cls("conv3x3", w, np.zeros(cout))

    @classmethod
    def dense(cls, nin: int, nout: int, rng: np.random.Generator) -> "Layer":
        limit = np.sqrt(6.0 / (nin + nout))
        w = rng.uniform(-limit, limit, size=(nin, nout))
        return cls("dense", w, np.zeros(nout))


@dataclass
class ActivationCache:
    """Per-layer outputs of one forward pass (``outputs[i]`` is layer i's output)."""

    input: np.ndarray
    outputs: list[np.ndarray] = field(default_factory=list)
    last_conv_index: int = -1
    squeezed: bool = False

    def layer_input(self, index: int) -> np.ndarray:
        return self.input if index == 0 else self.outputs[index - 1]


def last_conv_index(layers: Sequence[Layer]) -> int:
    idx = [i for i, layer in enumerate(layers) if layer.kind == "conv3x3"]
    return idx[-1] if idx else -1


# -- per-layer kernels ------------------------------------------------------


_CHUNK_ROWS = 4096  # im2col rows per block; keeps the column buffer cache-resident


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N*H*W, 9*C), zero padding 1, tap order (dy, dx, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def _chunks(x: np.ndarray):
    step = max(1, _CHUNK_ROWS // (x.shape[1] * x.shape[2]))
    for s in range(0, x.shape[0], step):
        yield slice(s, s + step)


def _conv(x: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    n, h, w, _ = x.shape
    out = np.empty((n, h, w, wmat.shape[1]), dtype=x.dtype)
    for sl in _chunks(x):
        out[sl] = (_im2col(x[sl]) @ wmat).reshape(out[sl].shape)
    return out


def _col2im(dy: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    n, h, w, cout = dy.shape
    c = wmat.shape[0] // 9
    taps = (dy.reshape(-1, cout) @ wmat.T).reshape(n, h, w, 3, 3, c)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=dy.dtype)
    for a in range(3):
        for b in range(3):
            xp[:, a : a + h, b : b + w] += taps[:, :, :, a, b]
    return xp[:, 1:-1, 1:-1]


def _conv_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    c = x.shape[-1]
    return _conv(x, layer.weight.reshape(9 * c, -1)) + layer.bias


def _conv_backward(layer: Layer, x: np.ndarray, dy: np.ndarray, want_params: bool, want_input: bool = True):
    c = x.shape[-1]
    cout = dy.shape[-1]
    if not want_input:
        dx = None
    elif c < cout // 4:
        dx = _col2im(dy, layer.weight.reshape(9 * c, cout))
    else:
        # stride-1 convolution of dy with the flipped, transposed kernel
        flipped = layer.weight[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, c)
        dx = _conv(dy, np.ascontiguousarray(flipped))
    grads = None
    if want_params:
        dw = np.zeros((9 * c, cout), dtype=x.dtype)
        for sl in _chunks(x):
            dw += _im2col(x[sl]).T @ dy[sl].reshape(-1, cout)
        grads = [dw.reshape(layer.weight.shape), dy.sum(axis=(0, 1, 2))]
    return dx, grads


def _pool_taps(x: np.ndarray) -> list[np.ndarray]:
    return [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]


def _pool_forward(x: np.ndarray) -> np.ndarray:
    a, b, c, d = _pool_taps(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _pool_backward(x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # gradient goes to the first maximal element of each 2x2 window (row-major)
    dx = np.zeros_like(x)
    taken = np.zeros(y.shape, dtype=bool)
    for (r, c), tap in zip(((0, 0), (0, 1), (1, 0), (1, 1)), _pool_taps(x)):
        hit = (tap == y) & ~taken
        dx[:, r::2, c::2] = dy * hit
        taken |= hit
    return dx


def _layer_forward(index: int, layer: Layer, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv3x3":
        if x.ndim != 4 or x.shape[-1] != layer.weight.shape[2]:
            raise EngineError(
                f"expected (N,H,W,{layer.weight.shape[2]}) input, got {x.shape}", index, kind
            )
        return _conv_forward(layer, x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "maxpool2":
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise EngineError(f"needs (N,H,W,C) input with even H and W, got {x.shape}", index, kind)
        return _pool_forward(x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise EngineError(f"expected (N,{layer.weight.shape[0]}) input, got {x.shape}", index, kind)
    return x @ layer.weight + layer.bias


def _layer_backward(layer: Layer, x: np.ndarray, y: np.ndarray, dy: np.ndarray, want_params: bool, want_input=True):
    kind = layer.kind
    if kind == "conv3x3":
        return _conv_backward(layer, x, dy, want_params, want_input)
    if kind == "relu":
        return dy * (x > 0), None
    if kind == "maxpool2":
        return _pool_backward(x, y, dy), None
    if kind == "flatten":
        return dy.reshape(x.shape), None
    grads = [x.T @ dy, dy.sum(axis=0)] if want_params else None
    return dy @ layer.weight.T, grads


# -- public ops ---------------------------------------------------------------


def forward(layers: Sequence[Layer], image: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    """Run ``image`` through ``layers``; returns logits and the activation cache."""
    x = np.asarray(image, dtype=DTYPE)
    squeezed = x.ndim == 3
    if squeezed:
        x = x[None]
    if x.ndim != 4:
        raise EngineError(f"image must be (H,W,C) or (N,H,W,C), got shape {np.shape(image)}")
    cache = ActivationCache(input=x, last_conv_index=last_conv_index(layers), squeezed=squeezed)
    for i, layer in enumerate(layers):
        x = _layer_forward(i, layer, x)
        cache.outputs.append(x)
    if x.ndim != 2:
        raise EngineError(f"model must end in a dense head, final output has shape {x.shape}")
    return (x[0] if squeezed else x), cache


def _backward(layers, cache, upstream, stop_after, want_params):
    if len(cache.outputs) != len(layers):
        raise EngineError(f"cache holds {len(cache.outputs)} outputs for a {len(layers)}-layer model")
    g = np.asarray(upstream, dtype=DTYPE)
    if cache.squeezed and g.ndim == 1:
        g = g[None]
    if g.shape != cache.outputs[-1].shape:
        raise EngineError(f"upstream gradient shape {g.shape} != logits shape {cache.outputs[-1].shape}")
    param_grads: list = [None] * len(layers)
    for i in range(len(layers) - 1, stop_after, -1):
        layer = layers[i]
        x = cache.layer_input(i)
        if layer.weight is not None and layer.kind == "conv3x3" and x.shape[-1] != layer.weight.shape[2]:
            raise EngineError("cache does not match model", i, layer.kind)
        # the image gradient is not needed when only parameter gradients are requested
        want_input = not (want_params and i == 0)
        g, param_grads[i] = _layer_backward(layer, x, cache.outputs[i], g, want_params, want_input)
    return g, param_grads


def backward_to_input(layers: Sequence[Layer], cache: ActivationCache, upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream_grad * logits)`` with respect to the input image."""
    g, _ = _backward(layers, cache, upstream_grad, -1, False)
    return g[0] if cache.squeezed else g


def backward_to_layer(
    layers: Sequence[Layer], cache: ActivationCache, upstream_grad: np.ndarray, layer_index: int
) -> np.ndarray:
    """Gradient of ``sum(upstream_grad * logits)`` with respect to layer ``layer_index``'s output."""
    if not 0 <= layer_index < len(layers):
        raise EngineError(f"layer index {layer_index} out of range for {len(layers)} layers")
    g, _ = _backward(layers, cache, upstream_grad, layer_index, False)
    return g[0] if cache.squeezed else g


def backward_params(layers: Sequence[Layer], cache: ActivationCache, upstream_grad: np.ndarray):
    """Parameter gradients (list aligned with ``layers``; ``None`` for parameterless layers)."""
    _, grads = _backward(layers, cache, upstream_grad, -1, True)
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, class_index) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy of softmax(logits) against ``class_index``.

    Works on a single logit vector (scalar loss) or a batch (one loss per row,
    ``class_index`` broadcast or given per row). The gradient is
    ``softmax - onehot``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    k = logits.shape[-1]
    idx = np.asarray(class_index)
    if np.any(idx < 0) or np.any(idx >= k):
        raise EngineError(f"class index {class_index} out of range for {k} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, np.broadcast_to(idx, logits.shape[:-1])[..., None].astype(np.intp), 1.0, axis=-1)
    loss = -(logp * onehot).sum(axis=-1)
    grad = np.exp(logp) - onehot
    return loss, grad
