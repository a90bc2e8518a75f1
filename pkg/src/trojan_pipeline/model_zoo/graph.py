from __future__ import annotations

import copy

import numpy as np

from ..tensor_core import LayerSpec, ShapeError


class ModelGraph:
    """Ordered layer list plus per-layer ``(weights, bias)`` for parametric layers.

    Shapes are validated end to end at construction, so a ModelGraph that
    exists is always runnable.
    """

    def __init__(self, layers, params, input_shape):
        self.layers: list[LayerSpec] = list(layers)
        self.params: dict[str, tuple[np.ndarray, np.ndarray]] = dict(params)
        self.input_shape = tuple(int(d) for d in input_shape)

        names = [spec.name for spec in self.layers]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate layer names: {dupes}")
        parametric = {spec.name for spec in self.layers if spec.parametric}
        extra = set(self.params) - parametric
        if extra:
            raise ValueError(f"params given for non-parametric or unknown layers: {sorted(extra)}")

        shapes = [self.input_shape]
        for spec in self.layers:
            if spec.parametric:
                if spec.name not in self.params:
                    raise ValueError(f"missing params for layer {spec.name!r}")
                w, b = self.params[spec.name]
                want_w, want_b = spec.param_shapes()
                if tuple(w.shape) != want_w or tuple(b.shape) != want_b:
                    raise ShapeError(
                        f"{spec.name}: params shaped {list(w.shape)}/{list(b.shape)}, "
                        f"expected {list(want_w)}/{list(want_b)}"
                    )
            shapes.append(spec.output_shape(shapes[-1]))
        self.input_shapes: list[tuple[int, ...]] = shapes[:-1]
        self.output_shape: tuple[int, ...] = shapes[-1]

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"ModelGraph({[s.name for s in self.layers]}, input_shape={self.input_shape})"

    def index_of(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise KeyError(name)

    @property
    def parametric_layers(self) -> list[str]:
        return [s.name for s in self.layers if s.parametric]

    def param_count(self, name: str) -> int:
        w, b = self.params[name]
        return int(w.size + b.size)

    def slice(self, lo: int, hi: int) -> "ModelGraph":
        """Independent sub-graph for layers ``lo..hi`` with copies of only their params."""
        layers = self.layers[lo:hi + 1]
        keep = {s.name for s in layers if s.parametric}
        params = {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items() if k in keep}
        return ModelGraph(layers, params, self.input_shapes[lo])

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        params = {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in self.params.items()}
        return ModelGraph(self.layers, params, self.input_shape)

    def same_params(self, other: "ModelGraph") -> bool:
        """Bitwise parameter equality."""
        if self.params.keys() != other.params.keys():
            return False
        return all(
            w.dtype == ow.dtype and w.tobytes() == ow.tobytes() and b.tobytes() == ob.tobytes()
            for (w, b), (ow, ob) in ((self.params[k], other.params[k]) for k in self.params)
        )


def init_params(layers, input_shape, seed: int = 42) -> dict:
    """He-style uniform init: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for spec in layers:
        shapes = spec.param_shapes()
        if shapes is None:
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=w_shape).astype(np.float32)
        params[spec.name] = (w, np.zeros(b_shape, dtype=np.float32))
    return params


def build_lenet(seed: int = 42) -> ModelGraph:
    layers = [
        LayerSpec("Conv2D", "Conv1", kernel=5, in_channels=1, out_channels=6),
        LayerSpec("ReLU", "ReLU1"),
        LayerSpec("MaxPool2D", "Pool1", kernel=2, stride=2),
        LayerSpec("Conv2D", "Conv2", kernel=5, padding=1, in_channels=6, out_channels=16),
        LayerSpec("ReLU", "ReLU2"),
        LayerSpec("MaxPool2D", "Pool2", kernel=2, stride=2),
        LayerSpec("Conv2D", "Conv3", kernel=5, in_channels=16, out_channels=120),
        LayerSpec("ReLU", "ReLU3"),
        LayerSpec("Flatten", "Flatten"),
        LayerSpec("Dense", "FC1", in_features=120, out_features=84),
        LayerSpec("ReLU", "ReLU4"),
        LayerSpec("Dense", "FC2", in_features=84, out_features=10),
        LayerSpec("Softmax", "Softmax"),
    ]
    input_shape = (1, 28, 28)
    return ModelGraph(layers, init_params(layers, input_shape, seed), input_shape)


def alexnet_layers() -> list[LayerSpec]:
    """AlexNet-shaped layer list (single tower, 227x227 input). Shape-only use."""
    return [
        LayerSpec("Conv2D", "Conv1", kernel=11, stride=4, in_channels=3, out_channels=96),
        LayerSpec("ReLU", "ReLU1"),
        LayerSpec("MaxPool2D", "Pool1", kernel=3, stride=2),
        LayerSpec("Conv2D", "Conv2", kernel=5, padding=2, in_channels=96, out_channels=256),
        LayerSpec("ReLU", "ReLU2"),
        LayerSpec("MaxPool2D", "Pool2", kernel=3, stride=2),
        LayerSpec("Conv2D", "Conv3", kernel=3, padding=1, in_channels=256, out_channels=384),
        LayerSpec("ReLU", "ReLU3"),
        LayerSpec("Conv2D", "Conv4", kernel=3, padding=1, in_channels=384, out_channels=384),
        LayerSpec("ReLU", "ReLU4"),
        LayerSpec("Conv2D", "Conv5", kernel=3, padding=1, in_channels=384, out_channels=256),
        LayerSpec("ReLU", "ReLU5"),
        LayerSpec("MaxPool2D", "Pool5", kernel=3, stride=2),
        LayerSpec("Flatten", "Flatten"),
        LayerSpec("Dense", "FC6", in_features=9216, out_features=4096),
        LayerSpec("ReLU", "ReLU6"),
        LayerSpec("Dense", "FC7", in_features=4096, out_features=4096),
        LayerSpec("ReLU", "ReLU7"),
        LayerSpec("Dense", "FC8", in_features=4096, out_features=1000),
        LayerSpec("Softmax", "Softmax"),
    ]


def build_alexnet(seed: int = 0) -> ModelGraph:
    """AlexNet-shaped graph with zero-filled parameters; validates shapes, not for training."""
    layers = alexnet_layers()
    params = {}
    for spec in layers:
        shapes = spec.param_shapes()
        if shapes:
            params[spec.name] = (np.zeros(shapes[0], np.float32), np.zeros(shapes[1], np.float32))
    return ModelGraph(layers, params, (3, 227, 227))
