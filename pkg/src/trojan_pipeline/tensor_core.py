"""Forward and backward numerics for LeNet-class CNN layers.

Tensors are plain numpy arrays. Storage is float32; every op accumulates in
float64 and casts back to the promoted input dtype, so float64 inputs (used by
the finite-difference gradient checks) stay float64 end to end.

Single-sample ops (``conv2d``, ``maxpool2d``, ...) take unbatched tensors and
are what inference and the node workers run. The ``*_batch`` / ``*_backward``
functions operate on a leading batch axis and are only used for training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("Conv2D", "MaxPool2D", "AvgPool2D", "ReLU", "Flatten", "Dense", "Softmax")
PARAMETRIC_KINDS = ("Conv2D", "Dense")


class ShapeError(ValueError):
    pass


class LayerError(ValueError):
    """A layer op failed during ``forward``; carries the layer name."""

    def __init__(self, layer: str, cause: Exception):
        super().__init__(f"layer {layer!r}: {cause}")
        self.layer = layer
        self.cause = cause


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def param_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
        if self.kind == "Conv2D":
            k = self.kernel
            return (self.out_channels, self.in_channels, k, k), (self.out_channels,)
        if self.kind == "Dense":
            return (self.out_features, self.in_features), (self.out_features,)
        return None

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape produced by this layer for an unbatched input of ``input_shape``."""
        shape = tuple(int(d) for d in input_shape)
        kind = self.kind
        if kind == "Conv2D":
            if len(shape) != 3:
                raise ShapeError(f"{self.name}: Conv2D expects [C,H,W], got {list(shape)}")
            c, h, w = shape
            if c != self.in_channels:
                raise ShapeError(
                    f"{self.name}: input shape {list(shape)} has {c} channels, "
                    f"weights expect {self.in_channels}"
                )
            return (self.out_channels,) + _window_out(h, w, self.kernel, self.stride, self.padding)
        if kind in ("MaxPool2D", "AvgPool2D"):
            if len(shape) != 3:
                raise ShapeError(f"{self.name}: {kind} expects [C,H,W], got {list(shape)}")
            c, h, w = shape
            return (c,) + _window_out(h, w, self.kernel, self.stride, 0)
        if kind == "ReLU":
            return shape
        if kind == "Flatten":
            return (int(np.prod(shape)),)
        if kind == "Dense":
            if shape != (self.in_features,):
                raise ShapeError(
                    f"{self.name}: Dense expects [{self.in_features}], got {list(shape)}"
                )
            return (self.out_features,)
        if kind == "Softmax":
            if len(shape) != 1:
                raise ShapeError(f"{self.name}: Softmax expects a 1-D input, got {list(shape)}")
            return shape
        raise AssertionError(kind)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v or k in ("kind", "name")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(**d)


def _window_out(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid window k={k} stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"window {k}x{k} larger than padded input {hp}x{wp}")
    return (hp - k) // stride + 1, (wp - k) // stride + 1


def _out_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt == np.float64 else np.dtype(np.float32)


# ---------------------------------------------------------------------------
# single-sample ops
# ---------------------------------------------------------------------------

def conv2d(x, weights, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    x, weights, bias = np.asarray(x), np.asarray(weights), np.asarray(bias)
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeError(
            f"conv2d expects input [C,H,W] and weights [O,C,K,K], "
            f"got {list(x.shape)} and {list(weights.shape)}"
        )
    if x.shape[0] != weights.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {list(x.shape)} vs weights shape "
            f"{list(weights.shape)}"
        )
    if weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"conv2d needs square kernels, got {list(weights.shape)}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"conv2d bias shape {list(bias.shape)} != [{weights.shape[0]}]")
    out, _ = conv2d_batch(x[None], weights, bias, stride, padding)
    return out[0]


def maxpool2d(x, kernel: int, stride: int) -> np.ndarray:
    return _pool(np.asarray(x), kernel, stride, np.max)


def avgpool2d(x, kernel: int, stride: int) -> np.ndarray:
    return _pool(np.asarray(x), kernel, stride, np.mean)


def _pool(x: np.ndarray, kernel: int, stride: int, reduce) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"pooling expects [C,H,W], got {list(x.shape)}")
    _window_out(x.shape[1], x.shape[2], kernel, stride, 0)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    if reduce is np.mean:
        return win.mean(axis=(3, 4), dtype=np.float64).astype(_out_dtype(x))
    return win.max(axis=(3, 4)).astype(_out_dtype(x))


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(_out_dtype(x))


def softmax(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError(f"softmax expects a 1-D input, got {list(x.shape)}")
    z = x.astype(np.float64)
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(_out_dtype(x))


def flatten(x) -> np.ndarray:
    return np.asarray(x).reshape(-1)


def dense(x, weights, bias) -> np.ndarray:
    x, weights, bias = np.asarray(x), np.asarray(weights), np.asarray(bias)
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(
            f"dense dimension mismatch: input {list(x.shape)} vs weights {list(weights.shape)}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias shape {list(bias.shape)} != [{weights.shape[0]}]")
    acc = weights.astype(np.float64) @ x.astype(np.float64) + bias
    return acc.astype(_out_dtype(x, weights, bias))


def apply_layer(spec: LayerSpec, x: np.ndarray, params=None) -> np.ndarray:
    kind = spec.kind
    if kind == "Conv2D":
        w, b = params
        return conv2d(x, w, b, spec.stride, spec.padding)
    if kind == "Dense":
        w, b = params
        return dense(x, w, b)
    if kind == "MaxPool2D":
        return maxpool2d(x, spec.kernel, spec.stride)
    if kind == "AvgPool2D":
        return avgpool2d(x, spec.kernel, spec.stride)
    if kind == "ReLU":
        return relu(x)
    if kind == "Flatten":
        return flatten(x)
    if kind == "Softmax":
        return softmax(x)
    raise AssertionError(kind)


def forward(model, x, from_layer: int = 0, to_layer: int | None = None,
            params: Mapping | None = None) -> np.ndarray:
    """Run layers ``from_layer..to_layer`` (inclusive) of ``model`` on one sample.

    ``params`` optionally overrides entries of ``model.params`` by layer name;
    node workers use it to route a layer through the attack buffer.
    """
    n = len(model.layers)
    if to_layer is None:
        to_layer = n - 1
    if not 0 <= from_layer <= to_layer < n:
        raise IndexError(f"layer range [{from_layer}, {to_layer}] outside [0, {n - 1}]")
    x = np.asarray(x)
    expected = model.input_shapes[from_layer]
    if tuple(x.shape) != tuple(expected):
        raise LayerError(
            model.layers[from_layer].name,
            ShapeError(f"input shape {list(x.shape)} != expected {list(expected)}"),
        )
    for spec in model.layers[from_layer:to_layer + 1]:
        p = None
        if spec.parametric:
            p = params[spec.name] if params is not None and spec.name in params else model.params[spec.name]
        try:
            x = apply_layer(spec, x, p)
        except ShapeError as exc:
            raise LayerError(spec.name, exc) from exc
    return x


# ---------------------------------------------------------------------------
# batched ops with backward passes (training only)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, tuple]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (n, c, x.shape[2], x.shape[3], ho, wo)


def conv2d_batch(x, weights, bias, stride: int = 1, padding: int = 0):
    """Batched convolution. Returns ``(out[N,O,H',W'], cache)``."""
    dt = _out_dtype(x, weights, bias)
    k = weights.shape[2]
    _window_out(x.shape[2], x.shape[3], k, stride, padding)
    cols, geom = _im2col(np.asarray(x, dtype=np.float64), k, stride, padding)
    wmat = weights.reshape(weights.shape[0], -1).astype(np.float64)
    out = cols @ wmat.T + bias.astype(np.float64)
    n, _, _, _, ho, wo = geom
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return out.astype(dt), (cols, geom, weights, stride, padding)


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dweights, dbias)`` of a batched convolution."""
    cols, (n, c, hp, wp, ho, wo), weights, stride, padding = cache
    o, _, k, _ = weights.shape
    dmat = np.asarray(dout, dtype=np.float64).transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(weights.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ weights.reshape(o, -1).astype(np.float64)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, hp, wp))
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += (
                dcols[..., u, v].transpose(0, 3, 1, 2)
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx, dw, db


def pool_batch(x, kernel: int, stride: int, mode: str = "max"):
    _window_out(x.shape[2], x.shape[3], kernel, stride, 0)
    win = sliding_window_view(np.asarray(x), (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    if mode == "max":
        flat = win.reshape(win.shape[:4] + (kernel * kernel,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        arg = None
        out = win.mean(axis=(4, 5), dtype=np.float64)
    return out.astype(_out_dtype(x)), (x.shape, kernel, stride, mode, arg)


def pool_backward(dout, cache):
    shape, k, stride, mode, arg = cache
    dout = np.asarray(dout, dtype=np.float64)
    n, c, ho, wo = dout.shape
    dx = np.zeros(shape)
    if mode == "max":
        # ties route to the first maximum, matching argmax
        ii = np.arange(ho)[:, None] * stride + arg // k
        jj = np.arange(wo)[None, :] * stride + arg % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn, cc, ii, jj), dout)
    else:
        g = dout / (k * k)
        for u in range(k):
            for v in range(k):
                dx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += g
    return dx


def dense_batch(x, weights, bias):
    dt = _out_dtype(x, weights, bias)
    out = np.asarray(x, dtype=np.float64) @ weights.astype(np.float64).T + bias
    return out.astype(dt), (np.asarray(x, dtype=np.float64), weights)


def dense_backward(dout, cache):
    x, weights = cache
    dout = np.asarray(dout, dtype=np.float64)
    return dout @ weights.astype(np.float64), dout.T @ x, dout.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
