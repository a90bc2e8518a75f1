import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trojan_pipeline.attack_engine import (
    SCALAR_SWEEP,
    AttackConfig,
    AttackError,
    DoubleBuffer,
    ParamStats,
    TriggerSpec,
    apply_trigger,
    attack_layer,
    measure_swap_in,
    minmax_swap,
    polarity_flip,
    prepare_payload,
    random_multipliers,
    random_scale_attack,
    scalar_attack,
    select_buffer,
    statistical_resample,
    swap_groups,
)

finite32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)
tensors = hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6),
                     elements=finite32)
conv_weights = hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, min_side=2, max_side=4),
                          elements=finite32)


# ---------------------------------------------------------------------------
# payload examples
# ---------------------------------------------------------------------------

def test_scalar_example():
    out = scalar_attack(np.array([1.0, -2.0, 0.5], np.float32), 0.6)
    np.testing.assert_array_equal(out, np.float32([0.6, -1.2, 0.3]))


def test_scalar_identity_and_nonfinite():
    x = np.random.default_rng(0).normal(size=20).astype(np.float32)
    assert scalar_attack(x, 1.0).tobytes() == x.tobytes()
    with pytest.raises(AttackError):
        scalar_attack(x, float("inf"))


def test_flip_signed_zero():
    out = polarity_flip(np.array([0.0], np.float32))
    assert out[0] == 0.0 and np.signbit(out[0])


def test_swap_example():
    assert minmax_swap(np.array([3.0, 1.0, 2.0]), "Dense").tolist() == [1.0, 3.0, 2.0]


def test_swap_ties_use_first_occurrence():
    assert minmax_swap(np.array([5.0, 0.0, 5.0, 0.0]), "Dense").tolist() == [0.0, 5.0, 5.0, 0.0]


def test_swap_constant_group_is_noop():
    w = np.ones((2, 1, 2, 2), np.float32)
    w[1, 0] = [[4, 1], [1, 1]]
    out = minmax_swap(w, "Conv2D")
    assert out[0].tolist() == w[0].tolist()
    assert out[1, 0].tolist() == [[1, 4], [1, 1]]


def test_swap_groups_per_kernel_and_per_filter():
    w = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
    assert len(swap_groups(w, "Conv2D", "kernel")) == 6
    assert len(swap_groups(w, "Conv2D", "filter")) == 2
    per_filter = minmax_swap(w, "Conv2D", "filter")
    assert per_filter[0].reshape(-1)[0] == 11 and per_filter[0].reshape(-1)[11] == 0
    per_kernel = minmax_swap(w, "Conv2D", "kernel")
    assert per_kernel[0, 0].reshape(-1).tolist() == [3, 1, 2, 0]


def test_swap_rejects_bad_inputs():
    with pytest.raises(AttackError):
        minmax_swap(np.zeros(4), "ReLU")
    with pytest.raises(AttackError):
        minmax_swap(np.zeros((1, 1, 1, 1)), "Conv2D")
    with pytest.raises(AttackError):
        minmax_swap(np.zeros((1, 1, 2, 2)), "Conv2D", "row")


def test_random_multipliers_distribution():
    m = random_multipliers(100_000, np.random.default_rng(1))
    assert m.min() > 0 and m.max() < 1
    assert 0.49 <= m.mean() <= 0.51
    assert 0.14 <= m.std() <= 0.16


def test_random_multipliers_alternative_distribution():
    m = random_multipliers(50_000, np.random.default_rng(2), mean=0.8, std=0.3)
    assert m.min() > 0 and m.max() < 1
    with pytest.raises(AttackError):
        random_multipliers(5, np.random.default_rng(2), mean=1.2)


def test_random_scale_seeded():
    x = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
    a, b = random_scale_attack(x, 7), random_scale_attack(x, 7)
    assert a.tobytes() == b.tobytes()
    assert random_scale_attack(x, 8).tobytes() != a.tobytes()
    assert np.all(np.abs(a) < np.abs(x))


def test_resample_constant_tensor():
    x = np.full(10, 0.25, np.float32)
    assert statistical_resample(x, 3).tobytes() == x.tobytes()
    with pytest.raises(AttackError):
        statistical_resample(np.ones(1, np.float32), 3)


def test_param_stats():
    st_ = ParamStats.of(np.array([[2.0, -1.0], [5.0, -1.0]]))
    assert (st_.argmin, st_.argmax, st_.count) == (1, 2, 4)
    assert st_.mean == 1.25 and st_.min == -1.0 and st_.max == 5.0
    with pytest.raises(AttackError):
        ParamStats.of(np.zeros(0))


# ---------------------------------------------------------------------------
# triggers and configuration
# ---------------------------------------------------------------------------

def test_periodic_trigger_example():
    trig = TriggerSpec("Periodic", period=3, phase=0)
    fired = [i for i in range(9) if apply_trigger(trig, i)]
    assert fired == [0, 3, 6]
    assert (trig.fired, trig.checked) == (3, 9)


@pytest.mark.parametrize("text,ids", [
    ("always", range(5)), ("never", []), ("periodic:4:1", [1]), ("window:2:4", [2, 3]),
])
def test_trigger_parse(text, ids):
    trig = TriggerSpec.parse(text)
    assert trig.describe() == text
    assert [i for i in range(5) if trig.should_fire(i)] == list(ids)


@pytest.mark.parametrize("text", ["sometimes", "periodic:0", "periodic:3:3", "window:5:1", "never:1"])
def test_trigger_parse_rejects(text):
    with pytest.raises(AttackError):
        TriggerSpec.parse(text)


def test_attack_config_validation_and_aliases():
    assert AttackConfig("flip", "FC2").kind == "PolarityFlip"
    assert AttackConfig("mean", "FC2", seed=1).label == "Mean"
    assert AttackConfig("scalar", "FC2", scale=0.6).label == "0.6"
    with pytest.raises(AttackError):
        AttackConfig("scalar", "FC2")
    with pytest.raises(AttackError):
        AttackConfig("random", "FC2")
    with pytest.raises(AttackError):
        AttackConfig("melt", "FC2")
    with pytest.raises(AttackError):
        AttackConfig("scalar", "FC2", scale=0.7).check_sweep()
    for s in SCALAR_SWEEP:
        AttackConfig("scalar", "FC2", scale=s).check_sweep()


def test_attack_config_round_trip():
    cfg = AttackConfig("random", "Conv2", TriggerSpec.parse("periodic:3:1"), seed=5,
                       random_scale=(0.6, 0.1))
    back = AttackConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.to_dict()["random_scale"] == [0.6, 0.1]


# ---------------------------------------------------------------------------
# double buffer and dual-route agreement
# ---------------------------------------------------------------------------

ALL_ATTACKS = [
    AttackConfig("scalar", "L", scale=0.6), AttackConfig("scalar", "L", scale=1.4),
    AttackConfig("random", "L", seed=3), AttackConfig("random", "L", seed=3, random_scale=(0.3, 0.2)),
    AttackConfig("mean", "L", seed=4), AttackConfig("flip", "L"),
    AttackConfig("swap", "L"), AttackConfig("swap", "L", granularity="filter"),
]


@pytest.mark.parametrize("layer", ["Conv1", "Conv3", "FC1"])
@pytest.mark.parametrize("attack", ALL_ATTACKS, ids=lambda a: a.label + a.granularity)
def test_streaming_route_matches_reference(lenet, layer, attack):
    kind = lenet.layers[lenet.index_of(layer)].kind
    w, b = lenet.params[layer]
    b = np.linspace(-0.2, 0.3, b.size, dtype=np.float32)
    buf = DoubleBuffer(kind, w, b)
    prepare_payload(buf, attack)
    ref_w, ref_b = attack_layer(w, b, attack, kind)
    assert buf.corrupted[0].tobytes() == ref_w.tobytes()
    assert buf.corrupted[1].tobytes() == ref_b.tobytes()


def test_reprepare_after_swap_restores_mirror(lenet):
    w, b = lenet.params["Conv2"]
    buf = DoubleBuffer("Conv2D", w, b)
    prepare_payload(buf, AttackConfig("flip", "Conv2"))
    prepare_payload(buf, AttackConfig("swap", "Conv2"))
    assert buf.corrupted[0].tobytes() == minmax_swap(w, "Conv2D").tobytes()
    assert buf.corrupted[1].tobytes() == b.tobytes()


def test_clean_buffer_untouched_and_readonly(lenet):
    w, b = lenet.params["FC1"]
    buf = DoubleBuffer("Dense", w, b)
    prepare_payload(buf, AttackConfig("scalar", "FC1", scale=1.2))
    assert buf.clean[0].tobytes() == w.tobytes() and buf.clean[1].tobytes() == b.tobytes()
    assert select_buffer(buf, False)[0].tobytes() == w.tobytes()
    with pytest.raises(ValueError):
        buf.clean[0][0, 0] = 1.0
    assert buf.prep_time is not None and buf.prep_time > 0


def test_selector_flip_shares_storage(lenet):
    buf = DoubleBuffer("Dense", *lenet.params["FC2"])
    prepare_payload(buf, AttackConfig("flip", "FC2"))
    assert select_buffer(buf, True)[0] is buf.corrupted[0]
    assert buf.active_params[0] is buf.corrupted[0]
    assert select_buffer(buf, False)[0] is buf.clean[0]
    assert buf.active == "clean"


def test_prepare_refused_while_corrupted_active(lenet):
    buf = DoubleBuffer("Dense", *lenet.params["FC2"])
    buf.select(True)
    with pytest.raises(AttackError):
        prepare_payload(buf, AttackConfig("flip", "FC2"))


def test_swap_in_far_faster_than_conv3_prep(lenet):
    buf = DoubleBuffer("Conv2D", *lenet.params["Conv3"])
    prep = prepare_payload(buf, AttackConfig("scalar", "Conv3", scale=0.8))
    assert measure_swap_in(buf) * 100 <= prep


# ---------------------------------------------------------------------------
# algebraic invariants
# ---------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(tensors)
def test_flip_involution(x):
    assert polarity_flip(polarity_flip(x)).tobytes() == x.tobytes()


@settings(max_examples=200, deadline=None)
@given(conv_weights, st.sampled_from(["kernel", "filter"]))
def test_swap_preserves_multiset(w, granularity):
    out = minmax_swap(w, "Conv2D", granularity)
    assert np.array_equal(np.sort(out, axis=None), np.sort(w, axis=None))


@settings(max_examples=200, deadline=None)
@given(tensors, st.integers(0, 2**32 - 1))
def test_resample_matches_moments(x, seed):
    out = statistical_resample(x, seed)
    before, after = ParamStats.of(x), ParamStats.of(out)
    scale = max(1.0, abs(before.mean), before.std)
    assert abs(after.mean - before.mean) <= 1e-6 * scale
    assert abs(after.std - before.std) <= 1e-6 * scale
    assert statistical_resample(x, seed).tobytes() == out.tobytes()


@settings(max_examples=200, deadline=None)
@given(tensors, st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_scalar_composition(x, a, b):
    composed = scalar_attack(scalar_attack(x, a), b)
    direct = scalar_attack(x, a * b)
    np.testing.assert_allclose(composed, direct, rtol=1e-6, atol=1e-6)
