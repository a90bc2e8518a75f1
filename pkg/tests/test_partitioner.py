import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_partition
from trojan_pipeline.partitioner import (
    LayerCost,
    NodeCapability,
    PartitionError,
    PartitionPlan,
    build_plan,
    default_nodes,
    layer_cost,
    model_costs,
    partition,
)


def _costs(lenet):
    return dict(zip((s.name for s in lenet.layers), model_costs(lenet)))


def test_conv1_cost(lenet):
    c = _costs(lenet)["Conv1"]
    assert c.flops == 6 * 1 * 25 * 24 * 24 == 86_400
    assert c.param_bytes == 4 * 156 == 624
    assert c.output_bytes == 4 * 6 * 24 * 24


def test_relu_cost(lenet):
    c = _costs(lenet)["ReLU1"]
    assert (c.flops, c.param_bytes) == (3_456, 0)


def test_compute_versus_memory_asymmetry(lenet):
    c = _costs(lenet)
    assert c["FC1"].param_bytes == 40_656 > c["Conv1"].param_bytes
    assert c["Conv1"].flops > c["FC1"].flops
    assert c["Conv1"].flops / c["Conv1"].param_bytes > 100 * c["FC1"].flops / c["FC1"].param_bytes


def test_dense_and_pool_costs(lenet):
    c = _costs(lenet)
    assert c["FC1"].flops == 120 * 84
    assert c["Pool1"].flops == 6 * 12 * 12
    assert c["Flatten"].output_bytes == 480


def test_costs_nonnegative_and_byte_invariants(lenet):
    for spec, shape, cost in zip(lenet.layers, lenet.input_shapes, model_costs(lenet)):
        assert min(cost.flops, cost.param_bytes, cost.output_bytes) >= 0
        n_params = lenet.param_count(spec.name) if spec.parametric else 0
        assert cost.param_bytes == 4 * n_params
        assert cost.output_bytes == 4 * int(np.prod(spec.output_shape(shape)))
        assert layer_cost(spec, shape) == cost


# ---------------------------------------------------------------------------
# LeNet plans
# ---------------------------------------------------------------------------

def test_single_node_takes_everything(lenet):
    plan = partition(lenet, [NodeCapability()])
    assert [(a.lo, a.hi) for a in plan.assignments] == [(0, 12)]


def test_two_nodes_put_conv1_block_on_first(lenet):
    plan = partition(lenet, default_nodes(2))
    first = plan.assignments[0]
    assert first.lo == 0 and first.layers[0] == "Conv1"
    assert {"Conv1", "ReLU1", "Pool1"} <= set(first.layers)
    assert plan.owner_of(lenet.index_of("Conv3")) == 1


def test_three_default_nodes(lenet):
    plan = partition(lenet, default_nodes(3))
    assert plan.splits() == (2, 3)
    assert plan.assignments[1].layers == ["Conv2"]
    assert [n.trusted for n in plan.nodes] == [True, False, True]


def test_compute_weight_shifts_load(lenet):
    fast_first = partition(lenet, [NodeCapability(10.0), NodeCapability(1.0)])
    equal = partition(lenet, [NodeCapability(), NodeCapability()])
    assert fast_first.splits()[0] > equal.splits()[0]


def test_memory_limit_forces_fc_off_small_node(lenet):
    small = NodeCapability(memory_limit_bytes=50_000)
    plan = partition(lenet, [NodeCapability(), small])
    assert plan.assignments[1].param_bytes <= 50_000
    plan.validate(model_costs(lenet))


def test_infeasible_names_node(lenet):
    with pytest.raises(PartitionError, match="node 0") as err:
        partition([LayerCost(1, 10**6, 4)], [NodeCapability(memory_limit_bytes=100)])
    assert err.value.node_index == 0


@pytest.mark.parametrize("limits", [(1.5e6, 100), (100, 1.5e6), (100, 100, 1.5e6)])
def test_blamed_node_is_the_bottleneck(limits):
    costs = [LayerCost(1, 10**6, 4), LayerCost(1, 10**6, 4)]
    nodes = [NodeCapability(memory_limit_bytes=m) for m in limits]
    with pytest.raises(PartitionError) as err:
        partition(costs, nodes)
    blamed = err.value.node_index
    assert f"node {blamed}" in str(err.value)
    nodes[blamed] = NodeCapability()
    partition(costs, nodes)


def test_infeasible_lenet(lenet):
    with pytest.raises(PartitionError, match="node"):
        partition(lenet, [NodeCapability(memory_limit_bytes=1000)] * 2)


def test_no_nodes():
    with pytest.raises(PartitionError):
        partition([LayerCost(1, 0, 4)], [])


def test_nonpositive_compute_weight():
    with pytest.raises(ValueError):
        NodeCapability(compute_weight=0)


def test_more_nodes_than_layers_yields_relays():
    plan = partition([LayerCost(10, 0, 4), LayerCost(10, 0, 4)], default_nodes(4))
    assert sum(not a.empty for a in plan.assignments) == 2
    assert plan.bottleneck == 10
    plan.validate()


def test_plan_json_round_trip(lenet):
    plan = partition(lenet, [NodeCapability(2.0, 1e6, True), NodeCapability(), NodeCapability(trusted=True)])
    back = PartitionPlan.from_dict(json.loads(plan.to_json()))
    assert back.to_dict() == plan.to_dict()
    assert back.nodes[0].memory_limit_bytes == 1e6
    assert math.isinf(back.nodes[1].memory_limit_bytes)


def test_validate_catches_gaps(lenet):
    costs = model_costs(lenet)
    plan = build_plan(costs, default_nodes(2), [4, 12])
    plan.validate(costs)
    plan.assignments[1].lo = 6
    with pytest.raises(PartitionError, match="contiguity"):
        plan.validate(costs)
    short = build_plan(costs, default_nodes(2), [4, 10])
    with pytest.raises(PartitionError, match="covers 11 of 13"):
        short.validate(costs)


def test_describe_lists_every_node(lenet):
    text = partition(lenet, default_nodes(3)).describe()
    assert text.splitlines()[0].startswith("Node 1 [trusted] layers 0..2: Conv1, ReLU1, Pool1")
    assert "Node 2 [untrusted]" in text


# ---------------------------------------------------------------------------
# optimality against exhaustive enumeration
# ---------------------------------------------------------------------------

instances = st.integers(1, 10).flatmap(lambda n_layers: st.tuples(
    st.lists(st.integers(0, 1000), min_size=n_layers, max_size=n_layers),
    st.lists(st.integers(0, 400), min_size=n_layers, max_size=n_layers),
    st.lists(st.tuples(st.sampled_from([0.5, 1.0, 2.0, 3.0]),
                       st.one_of(st.just(math.inf), st.integers(0, 2000))),
             min_size=1, max_size=4),
))


def _as_problem(instance):
    flops, param_bytes, node_specs = instance
    costs = [LayerCost(f, p, 4) for f, p in zip(flops, param_bytes)]
    nodes = [NodeCapability(w, m) for w, m in node_specs]
    return costs, nodes


@settings(max_examples=300, deadline=None)
@given(instances)
def test_dp_matches_brute_force(instance):
    costs, nodes = _as_problem(instance)
    best, ends = brute_force_partition(
        [c.flops for c in costs], [c.param_bytes for c in costs],
        [n.compute_weight for n in nodes], [n.memory_limit_bytes for n in nodes])
    if ends is None:
        with pytest.raises(PartitionError):
            partition(costs, nodes)
        return
    plan = partition(costs, nodes)
    assert plan.bottleneck == best
    assert [a.hi for a in plan.assignments] == ends
    plan.validate(costs)


@settings(max_examples=150, deadline=None)
@given(instances, st.sampled_from([0.5, 1.0, 2.0]))
def test_adding_a_node_never_hurts(instance, weight):
    costs, nodes = _as_problem(instance)
    try:
        before = partition(costs, nodes).bottleneck
    except PartitionError:
        return
    assert partition(costs, nodes + [NodeCapability(weight)]).bottleneck <= before
