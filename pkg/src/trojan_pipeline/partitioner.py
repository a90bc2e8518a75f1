"""Per-layer cost estimates and contiguous layer-to-node assignment.

The plan minimises the bottleneck normalised compute load
``max_i flops_i / compute_weight_i`` subject to each node's memory limit.
Node ranges may be empty: such a node relays blobs untouched, which is what
makes adding a node never worsen the optimum. Communication volume is
reported per node but not optimised.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class PartitionError(ValueError):
    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message)
        self.node_index = node_index


@dataclass(frozen=True)
class LayerCost:
    flops: int
    param_bytes: int
    output_bytes: int


@dataclass(frozen=True)
class NodeCapability:
    compute_weight: float = 1.0
    memory_limit_bytes: float = math.inf
    trusted: bool = False

    def __post_init__(self):
        if not self.compute_weight > 0:
            raise ValueError(f"compute_weight must be > 0, got {self.compute_weight}")

    def to_dict(self) -> dict:
        mem = None if math.isinf(self.memory_limit_bytes) else self.memory_limit_bytes
        return {"compute_weight": self.compute_weight, "memory_limit_bytes": mem,
                "trusted": self.trusted}

    @classmethod
    def from_dict(cls, d) -> "NodeCapability":
        mem = d.get("memory_limit_bytes")
        return cls(float(d.get("compute_weight", 1.0)),
                   math.inf if mem is None else float(mem), bool(d.get("trusted", False)))


def default_nodes(n: int) -> list[NodeCapability]:
    """``n`` equal nodes; the first and last are trusted (ingress and classifier)."""
    return [NodeCapability(trusted=(i == 0 or i == n - 1)) for i in range(n)]


def layer_cost(spec, input_shape) -> LayerCost:
    out_shape = spec.output_shape(input_shape)
    out_elems = int(np.prod(out_shape))
    if spec.kind == "Conv2D":
        k = spec.kernel
        flops = spec.out_channels * spec.in_channels * k * k * out_shape[1] * out_shape[2]
    elif spec.kind == "Dense":
        flops = spec.out_features * spec.in_features
    else:
        flops = out_elems
    shapes = spec.param_shapes()
    n_params = sum(int(np.prod(s)) for s in shapes) if shapes else 0
    return LayerCost(int(flops), 4 * n_params, 4 * out_elems)


def model_costs(model) -> list[LayerCost]:
    return [layer_cost(spec, shape) for spec, shape in zip(model.layers, model.input_shapes)]


@dataclass
class Assignment:
    node_index: int
    lo: int
    hi: int  # inclusive; hi == lo - 1 for an empty (relay) range
    flops: int = 0
    load: float = 0.0
    param_bytes: int = 0
    output_bytes: int = 0
    layers: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.hi < self.lo


@dataclass
class PartitionPlan:
    assignments: list[Assignment]
    nodes: list[NodeCapability]
    num_layers: int

    @property
    def bottleneck(self) -> float:
        return max(a.load for a in self.assignments)

    def owner_of(self, layer_index: int) -> int:
        for a in self.assignments:
            if a.lo <= layer_index <= a.hi:
                return a.node_index
        raise IndexError(layer_index)

    def splits(self) -> tuple[int, ...]:
        return tuple(a.hi for a in self.assignments[:-1])

    def validate(self, costs: list[LayerCost] | None = None) -> None:
        expect = 0
        for i, a in enumerate(self.assignments):
            if a.node_index != i:
                raise PartitionError(f"assignment {i} names node {a.node_index}", i)
            if a.lo != expect or a.hi < a.lo - 1:
                raise PartitionError(f"node {i}: range [{a.lo}, {a.hi}] breaks contiguity", i)
            expect = a.hi + 1
            if costs is not None:
                mem = sum(c.param_bytes for c in costs[a.lo:a.hi + 1])
                if mem > self.nodes[i].memory_limit_bytes:
                    raise PartitionError(f"node {i}: {mem} param bytes exceed its limit", i)
        if expect != self.num_layers:
            raise PartitionError(f"plan covers {expect} of {self.num_layers} layers")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "bottleneck_load": self.bottleneck,
            "nodes": [
                {
                    "node": a.node_index + 1,
                    "node_index": a.node_index,
                    "range": [a.lo, a.hi],
                    "layers": a.layers,
                    "flops": a.flops,
                    "load": a.load,
                    "param_bytes": a.param_bytes,
                    "output_bytes": a.output_bytes,
                    **self.nodes[a.node_index].to_dict(),
                }
                for a in self.assignments
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "PartitionPlan":
        nodes = [NodeCapability.from_dict(n) for n in d["nodes"]]
        assignments = [
            Assignment(n["node_index"], n["range"][0], n["range"][1], n.get("flops", 0),
                       n.get("load", 0.0), n.get("param_bytes", 0), n.get("output_bytes", 0),
                       list(n.get("layers", [])))
            for n in d["nodes"]
        ]
        return cls(assignments, nodes, d["num_layers"])

    def describe(self) -> str:
        lines = []
        for a in self.assignments:
            node = self.nodes[a.node_index]
            tag = "trusted" if node.trusted else "untrusted"
            span = ", ".join(a.layers) if a.layers else "(relay)"
            lines.append(f"Node {a.node_index + 1} [{tag}] layers {a.lo}..{a.hi}: {span} "
                         f"| flops={a.flops} load={a.load:.0f} params={a.param_bytes}B "
                         f"out={a.output_bytes}B")
        return "\n".join(lines)


def build_plan(costs, nodes, ends, names=None) -> PartitionPlan:
    """Plan from explicit range ends (``ends[i]`` = last layer of node i, inclusive)."""
    assignments = []
    lo = 0
    for i, hi in enumerate(ends):
        seg = costs[lo:hi + 1]
        flops = sum(c.flops for c in seg)
        out_bytes = seg[-1].output_bytes if seg else 0
        assignments.append(Assignment(
            i, lo, hi, flops, flops / nodes[i].compute_weight,
            sum(c.param_bytes for c in seg), out_bytes,
            list(names[lo:hi + 1]) if names is not None else [],
        ))
        lo = hi + 1
    return PartitionPlan(assignments, list(nodes), len(costs))


def partition(model_or_costs, nodes) -> PartitionPlan:
    """Exact bottleneck-optimal contiguous partition by DP over (node, layer) suffixes.

    Among optimal plans the one with the earliest split points (lexicographic
    on range ends) is returned.
    """
    if hasattr(model_or_costs, "layers"):
        costs = model_costs(model_or_costs)
        names = [s.name for s in model_or_costs.layers]
    else:
        costs, names = list(model_or_costs), None
    nodes = list(nodes)
    if not nodes:
        raise PartitionError("need at least one node")
    ends = _solve(costs, nodes)
    if ends is None:
        raise PartitionError(*_blame(costs, nodes))
    plan = build_plan(costs, nodes, ends, names)
    plan.validate(costs)
    return plan


def _solve(costs, nodes):
    L, n = len(costs), len(nodes)
    fl = np.concatenate([[0], np.cumsum([c.flops for c in costs])]).astype(np.int64)
    pb = np.concatenate([[0], np.cumsum([c.param_bytes for c in costs])]).astype(np.int64)

    def load(j, lo, hi):  # layers lo..hi inclusive
        return int(fl[hi + 1] - fl[lo]) / nodes[j].compute_weight

    def fits(j, lo, hi):
        return int(pb[hi + 1] - pb[lo]) <= nodes[j].memory_limit_bytes

    # best[j][i]: optimal bottleneck placing layers i..L-1 on nodes j..n-1
    inf = math.inf
    best = [[inf] * (L + 1) for _ in range(n + 1)]
    best[n][L] = 0.0
    for j in range(n - 1, -1, -1):
        for i in range(L + 1):
            b = inf
            for hi in range(i - 1, L):
                if not fits(j, i, hi):
                    break
                b = min(b, max(load(j, i, hi), best[j + 1][hi + 1]))
            best[j][i] = b
    target = best[0][0]
    if math.isinf(target):
        return None
    ends, i = [], 0
    for j in range(n):
        for hi in range(i - 1, L):
            if fits(j, i, hi) and max(load(j, i, hi), best[j + 1][hi + 1]) <= target:
                ends.append(hi)
                i = hi + 1
                break
    return ends


def _blame(costs, nodes):
    total = sum(c.param_bytes for c in costs)
    for j, node in enumerate(nodes):
        relaxed = list(nodes)
        relaxed[j] = NodeCapability(node.compute_weight, math.inf, node.trusted)
        if _solve(costs, relaxed) is not None:
            return (f"infeasible memory constraints: node {j} "
                    f"(limit {node.memory_limit_bytes:g} B) cannot hold its share of "
                    f"{total} param bytes", j)
    j = min(range(len(nodes)), key=lambda k: nodes[k].memory_limit_bytes)
    return (f"infeasible memory constraints: {total} param bytes do not fit; "
            f"tightest is node {j} (limit {nodes[j].memory_limit_bytes:g} B)", j)
