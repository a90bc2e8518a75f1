from __future__ import annotations

import logging

import numpy as np

from .. import tensor_core as tc
from .data import Dataset
from .graph import ModelGraph

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def loss_and_grads(model: ModelGraph, images: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over a batch and analytic gradients per layer.

    The graph must end in Softmax; its gradient is fused with the loss.
    Returns ``(loss, {layer_name: (dweights, dbias)})`` in float64.
    """
    if model.layers[-1].kind != "Softmax":
        raise ValueError("training needs a graph ending in Softmax")
    x = np.asarray(images)
    caches = []
    for spec in model.layers[:-1]:
        kind = spec.kind
        if kind == "Conv2D":
            w, b = model.params[spec.name]
            x, cache = tc.conv2d_batch(x, w, b, spec.stride, spec.padding)
        elif kind == "Dense":
            w, b = model.params[spec.name]
            x, cache = tc.dense_batch(x, w, b)
        elif kind in ("MaxPool2D", "AvgPool2D"):
            mode = "max" if kind == "MaxPool2D" else "avg"
            x, cache = tc.pool_batch(x, spec.kernel, spec.stride, mode)
        elif kind == "ReLU":
            cache = x > 0
            x = np.maximum(x, 0)
        elif kind == "Flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"{spec.name}: {kind} not supported inside a trainable graph")
        caches.append(cache)

    loss, grad = tc.softmax_cross_entropy(x, labels)
    grads = {}
    for spec, cache in zip(reversed(model.layers[:-1]), reversed(caches)):
        kind = spec.kind
        if kind == "Conv2D":
            grad, dw, db = tc.conv2d_backward(grad, cache)
            grads[spec.name] = (dw, db)
        elif kind == "Dense":
            grad, dw, db = tc.dense_backward(grad, cache)
            grads[spec.name] = (dw, db)
        elif kind in ("MaxPool2D", "AvgPool2D"):
            grad = tc.pool_backward(grad, cache)
        elif kind == "ReLU":
            grad = grad * cache
        elif kind == "Flatten":
            grad = grad.reshape(cache)
    return loss, grads


def train(model: ModelGraph, train_set: Dataset, epochs: int = 2, lr: float = 0.05,
          batch: int = 16, seed: int = 42, history: list | None = None) -> ModelGraph:
    """Minibatch SGD on cross-entropy. Returns a new model; ``model`` is untouched.

    Deterministic for a given seed: the only randomness is the per-epoch
    shuffle drawn from ``default_rng(seed)``. Mean loss per epoch is appended
    to ``history`` when given.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if not lr >= 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    model = model.copy()
    rng = np.random.default_rng(seed)
    n = len(train_set)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        steps = 0
        for bi, start in enumerate(range(0, n, batch)):
            idx = order[start:start + batch]
            loss, grads = loss_and_grads(model, train_set.images[idx], train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi, loss)
            for name, (dw, db) in grads.items():
                w, b = model.params[name]
                model.params[name] = (
                    (w - lr * dw).astype(np.float32),
                    (b - lr * db).astype(np.float32),
                )
            total += loss
            steps += 1
        mean_loss = total / steps
        log.info("epoch %d: mean loss %.4f", epoch + 1, mean_loss)
        if history is not None:
            history.append(mean_loss)
    return model


def predict(model: ModelGraph, images: np.ndarray) -> np.ndarray:
    """Class probabilities per image, using the same single-sample path as node workers."""
    return np.stack([tc.forward(model, img) for img in images])


def evaluate(model: ModelGraph, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n_out = model.output_shape[0]
    if int(test_set.labels.max()) >= n_out:
        raise ValueError(f"labels reach {int(test_set.labels.max())} but model emits {n_out} classes")
    probs = predict(model, test_set.images)
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return float(np.mean(probs.argmax(axis=1) == test_set.labels))
