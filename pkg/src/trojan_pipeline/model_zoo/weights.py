"""Weight file: human-readable JSON manifest followed by raw little-endian float32 blobs.

Layout::

    TPWEIGHTS 1\\n
    <header byte length, decimal>\\n
    <JSON header: input_shape, layers, tensors[name, layer, role, kind, shape, offset, nbytes]>
    <blob section; tensor offsets are relative to its start>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..tensor_core import LayerSpec
from .graph import ModelGraph

MAGIC = b"TPWEIGHTS 1\n"


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int, layer: str | None = None):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
        self.layer = layer


def save_model(model: ModelGraph, path) -> None:
    tensors = []
    blobs = []
    offset = 0
    for spec in model.layers:
        if not spec.parametric:
            continue
        for role, arr in zip(("weight", "bias"), model.params[spec.name]):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({
                "name": f"{spec.name}.{role}",
                "layer": spec.name,
                "role": role,
                "kind": spec.kind,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            })
            blobs.append(data)
            offset += len(data)
    header = json.dumps({
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "tensors": tensors,
    }, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"%d\n" % len(header))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_model(path) -> ModelGraph:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ModelFormatError("not a weight file: bad magic", 0)
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    if nl < 0 or not raw[pos:nl].isdigit():
        raise ModelFormatError("missing header length line", pos)
    hlen = int(raw[pos:nl])
    hstart = nl + 1
    if len(raw) < hstart + hlen:
        raise ModelFormatError(f"header truncated: need {hlen} bytes", len(raw))
    try:
        header = json.loads(raw[hstart:hstart + hlen])
        layers = [LayerSpec.from_dict(d) for d in header["layers"]]
        entries = header["tensors"]
        input_shape = header["input_shape"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed header: {exc}", hstart) from exc

    blob_start = hstart + hlen
    found: dict[str, dict[str, np.ndarray]] = {}
    for entry in entries:
        layer = entry["layer"]
        shape = tuple(entry["shape"])
        want = 4 * int(np.prod(shape))
        at = blob_start + entry["offset"]
        if entry["nbytes"] != want:
            raise ModelFormatError(
                f"{layer}: manifest shape {list(shape)} needs {want} bytes, blob has {entry['nbytes']}",
                at, layer,
            )
        if at + want > len(raw):
            raise ModelFormatError(f"{layer}: {entry['role']} blob truncated", len(raw), layer)
        arr = np.frombuffer(raw, dtype="<f4", count=want // 4, offset=at).reshape(shape)
        found.setdefault(layer, {})[entry["role"]] = arr.astype(np.float32)

    params = {}
    for spec in layers:
        if not spec.parametric:
            continue
        got = found.get(spec.name, {})
        if set(got) != {"weight", "bias"}:
            raise ModelFormatError(f"{spec.name}: missing weight or bias entry", hstart, spec.name)
        want_w, want_b = spec.param_shapes()
        if got["weight"].shape != want_w or got["bias"].shape != want_b:
            raise ModelFormatError(
                f"{spec.name}: manifest shapes {list(got['weight'].shape)}/{list(got['bias'].shape)} "
                f"do not match layer {list(want_w)}/{list(want_b)}",
                hstart, spec.name,
            )
        params[spec.name] = (got["weight"], got["bias"])
    return ModelGraph(layers, params, input_shape)
