"""Trigger, payload transformations, and the double-buffered swap-in.

Two routes compute every payload:

* the vectorised functions (``scalar_attack``, ``minmax_swap``, ...) are the
  reference definitions, one parameter tensor at a time;
* ``prepare_payload`` runs the on-node routine, which streams element by
  element from the clean buffer into a pre-allocated mirror buffer using
  statistics profiled once at deployment. Its wall-clock cost is what the
  timing tables report.

Both routes must agree bitwise; the test suite checks that.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SCALAR_SWEEP = (0.6, 0.8, 1.2, 1.4)
KINDS = ("Scalar", "RandomScale", "StatisticalResample", "PolarityFlip", "MaxMinSwap")
KIND_ALIASES = {
    "scalar": "Scalar", "random": "RandomScale", "randomscale": "RandomScale",
    "mean": "StatisticalResample", "resample": "StatisticalResample",
    "statistical": "StatisticalResample", "statisticalresample": "StatisticalResample",
    "flip": "PolarityFlip", "polarity": "PolarityFlip", "polarityflip": "PolarityFlip",
    "swap": "MaxMinSwap", "minmax": "MaxMinSwap", "maxminswap": "MaxMinSwap",
}
# short column labels used in reports
KIND_LABELS = {
    "Scalar": "Scalar", "RandomScale": "Random", "StatisticalResample": "Mean",
    "PolarityFlip": "Flip", "MaxMinSwap": "Swap",
}

RANDOM_SCALE_MEAN = 0.5
RANDOM_SCALE_STD = 0.15


class AttackError(ValueError):
    pass


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamStats:
    mean: float
    std: float
    min: float
    max: float
    argmin: int
    argmax: int
    count: int

    @classmethod
    def of(cls, x) -> "ParamStats":
        flat = np.asarray(x).reshape(-1)
        if flat.size == 0:
            raise AttackError("cannot profile an empty tensor")
        imin, imax = int(flat.argmin()), int(flat.argmax())
        return cls(
            mean=float(flat.mean(dtype=np.float64)),
            std=float(flat.std(dtype=np.float64)),
            min=float(flat[imin]), max=float(flat[imax]),
            argmin=imin, argmax=imax, count=int(flat.size),
        )


SWAP_GRANULARITIES = ("kernel", "filter")


def swap_groups(weights, layer_kind: str, granularity: str = "kernel") -> list[np.ndarray]:
    """Flat views over which max/min are exchanged, in row-major order.

    Conv2D: one group per 2-D kernel ``w[o, c]`` (``granularity="kernel"``) or
    per output filter ``w[o]`` (``"filter"``). Dense: the whole matrix.
    """
    w = np.asarray(weights)
    if layer_kind == "Conv2D":
        if granularity == "kernel":
            return [w[o, c].reshape(-1) for o in range(w.shape[0]) for c in range(w.shape[1])]
        if granularity == "filter":
            return [w[o].reshape(-1) for o in range(w.shape[0])]
        raise AttackError(f"unknown swap granularity {granularity!r}")
    if layer_kind == "Dense":
        return [w.reshape(-1)]
    raise AttackError(f"max-min swap undefined for layer kind {layer_kind!r}")


# ---------------------------------------------------------------------------
# reference payloads
# ---------------------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def scalar_attack(params, s: float) -> np.ndarray:
    if not np.isfinite(s):
        raise AttackError(f"scalar must be finite, got {s}")
    x = np.asarray(params, dtype=np.float32)
    return x * np.float32(s)


def random_multipliers(n: int, rng, mean: float = RANDOM_SCALE_MEAN,
                       std: float = RANDOM_SCALE_STD) -> np.ndarray:
    """``n`` draws of N(mean, std^2) kept only inside the open interval (0, 1)."""
    if not 0.0 < mean < 1.0 or not std > 0.0:
        raise AttackError(f"random-scale distribution needs 0 < mean < 1 and std > 0, got {mean}/{std}")
    rng = _rng(rng)
    out = np.empty(n, dtype=np.float32)
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.normal(mean, std, size=need + need // 100 + 8)
        draw = draw.astype(np.float32)
        draw = draw[(draw > 0) & (draw < 1)][:need]
        out[filled:filled + draw.size] = draw
        filled += draw.size
    return out


def random_scale_attack(params, seed, mean: float = RANDOM_SCALE_MEAN,
                        std: float = RANDOM_SCALE_STD) -> np.ndarray:
    x = np.asarray(params, dtype=np.float32)
    return x * random_multipliers(x.size, seed, mean, std).reshape(x.shape)


def polarity_flip(params) -> np.ndarray:
    return np.negative(np.asarray(params, dtype=np.float32))


def minmax_swap(params, layer_kind: str, granularity: str = "kernel") -> np.ndarray:
    """Exchange the first max and first min of each swap group; constant groups are left alone."""
    out = np.array(params, dtype=np.float32, copy=True)
    for group in swap_groups(out, layer_kind, granularity):
        if group.size < 2:
            raise AttackError("max-min swap needs at least 2 elements per group")
        imax, imin = int(group.argmax()), int(group.argmin())
        if group[imax] != group[imin]:
            group[imax], group[imin] = group[imin], group[imax]
    return out


def moment_matched_values(stats: ParamStats, rng) -> np.ndarray:
    """Fresh normal draws shifted and scaled so their sample mean/std equal ``stats``."""
    if stats.count < 2:
        raise AttackError("statistical resample needs at least 2 values")
    if stats.std == 0.0:
        return np.full(stats.count, stats.mean, dtype=np.float32)
    z = _rng(rng).standard_normal(stats.count)
    z = (z - z.mean()) / z.std()
    return (stats.mean + stats.std * z).astype(np.float32)


def statistical_resample(params, seed) -> np.ndarray:
    x = np.asarray(params, dtype=np.float32)
    return moment_matched_values(ParamStats.of(x), seed).reshape(x.shape)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TriggerSpec:
    mode: str = "Always"
    period: int = 1
    phase: int = 0
    start: int = 0
    end: int = 0
    fired: int = field(default=0, compare=False)
    checked: int = field(default=0, compare=False)

    def __post_init__(self):
        self.mode = self.mode.capitalize()
        if self.mode not in ("Always", "Never", "Periodic", "Window"):
            raise AttackError(f"unknown trigger mode {self.mode!r}")
        if self.mode == "Periodic" and not (self.period >= 1 and 0 <= self.phase < self.period):
            raise AttackError(f"periodic trigger needs period>=1 and 0<=phase<period, "
                              f"got {self.period}/{self.phase}")
        if self.mode == "Window" and self.end < self.start:
            raise AttackError(f"window end {self.end} before start {self.start}")

    def should_fire(self, inference_id: int) -> bool:
        if self.mode == "Always":
            return True
        if self.mode == "Never":
            return False
        if self.mode == "Periodic":
            return inference_id % self.period == self.phase
        return self.start <= inference_id < self.end

    @classmethod
    def parse(cls, text: str) -> "TriggerSpec":
        """``always`` | ``never`` | ``periodic:K:P`` | ``window:START:END`` (END exclusive)."""
        parts = text.strip().lower().split(":")
        try:
            if parts[0] == "periodic":
                return cls("Periodic", period=int(parts[1]), phase=int(parts[2]) if len(parts) > 2 else 0)
            if parts[0] == "window":
                return cls("Window", start=int(parts[1]), end=int(parts[2]))
        except (IndexError, ValueError) as exc:
            raise AttackError(f"bad trigger {text!r}: {exc}") from exc
        if len(parts) != 1:
            raise AttackError(f"bad trigger {text!r}")
        return cls(parts[0])

    def describe(self) -> str:
        if self.mode == "Periodic":
            return f"periodic:{self.period}:{self.phase}"
        if self.mode == "Window":
            return f"window:{self.start}:{self.end}"
        return self.mode.lower()

    def to_dict(self) -> dict:
        return {"mode": self.mode, "period": self.period, "phase": self.phase,
                "start": self.start, "end": self.end}


def apply_trigger(trigger: TriggerSpec, inference_id: int) -> bool:
    fired = trigger.should_fire(inference_id)
    trigger.checked += 1
    if fired:
        trigger.fired += 1
    return fired


@dataclass
class AttackConfig:
    kind: str
    target_layer: str
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    scale: Optional[float] = None
    seed: Optional[int] = None
    granularity: str = "kernel"
    # (mean, std) of the truncated normal multiplier distribution
    random_scale: tuple[float, float] = (RANDOM_SCALE_MEAN, RANDOM_SCALE_STD)

    def __post_init__(self):
        self.random_scale = (float(self.random_scale[0]), float(self.random_scale[1]))
        self.kind = KIND_ALIASES.get(self.kind.lower(), self.kind)
        if self.granularity not in SWAP_GRANULARITIES:
            raise AttackError(f"unknown swap granularity {self.granularity!r}")
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.kind == "Scalar":
            if self.scale is None or not np.isfinite(self.scale):
                raise AttackError("scalar attack needs a finite scale")
        if self.kind in ("RandomScale", "StatisticalResample") and self.seed is None:
            raise AttackError(f"{self.kind} attack needs a seed")

    @property
    def label(self) -> str:
        """Accuracy-table column for this attack: the scale for Scalar, else a short name."""
        if self.kind == "Scalar":
            return f"{self.scale:g}"
        return KIND_LABELS[self.kind]

    def check_sweep(self) -> None:
        if self.kind == "Scalar" and float(self.scale) not in SCALAR_SWEEP:
            raise AttackError(f"sweep scalars must be one of {SCALAR_SWEEP}, got {self.scale}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target_layer": self.target_layer, "trigger": self.trigger.to_dict()}
        if self.scale is not None:
            d["scale"] = self.scale
        if self.seed is not None:
            d["seed"] = self.seed
        if self.kind == "MaxMinSwap":
            d["granularity"] = self.granularity
        if self.kind == "RandomScale":
            d["random_scale"] = list(self.random_scale)
        return d

    @classmethod
    def from_dict(cls, d) -> "AttackConfig":
        trig = d.get("trigger", "always")
        trig = TriggerSpec.parse(trig) if isinstance(trig, str) else TriggerSpec(**trig)
        return cls(d["kind"], d["target_layer"], trig, d.get("scale"), d.get("seed"),
                   d.get("granularity", "kernel"),
                   tuple(d.get("random_scale", (RANDOM_SCALE_MEAN, RANDOM_SCALE_STD))))


def attack_layer(weights, bias, attack: AttackConfig, layer_kind: str):
    """Reference route: corrupted ``(weights, bias)`` for one layer."""
    kind = attack.kind
    if kind == "Scalar":
        return scalar_attack(weights, attack.scale), scalar_attack(bias, attack.scale)
    if kind == "PolarityFlip":
        return polarity_flip(weights), polarity_flip(bias)
    if kind == "MaxMinSwap":
        return (minmax_swap(weights, layer_kind, attack.granularity),
                np.array(bias, dtype=np.float32))
    ss_w, ss_b = np.random.SeedSequence(attack.seed).spawn(2)
    if kind == "RandomScale":
        dist = attack.random_scale
        return random_scale_attack(weights, ss_w, *dist), random_scale_attack(bias, ss_b, *dist)
    return statistical_resample(weights, ss_w), statistical_resample(bias, ss_b)


# ---------------------------------------------------------------------------
# double buffer
# ---------------------------------------------------------------------------

class DoubleBuffer:
    """Clean and corrupted copies of one layer's parameters with a flip selector.

    Construction is the deployment step: the mirror buffer is allocated and the
    layer is profiled (global moments plus per-group extreme positions).
    Neither cost is part of ``prep_time``.
    """

    def __init__(self, layer_kind: str, weights, bias):
        self.layer_kind = layer_kind
        w = np.array(weights, dtype=np.float32, copy=True)
        b = np.array(bias, dtype=np.float32, copy=True)
        w.flags.writeable = False
        b.flags.writeable = False
        self.clean = (w, b)
        self.corrupted = (w.copy(), b.copy())
        self.active = "clean"
        self.prep_time: float | None = None
        self.prepared: AttackConfig | None = None
        self._mirror = True

        t0 = time.perf_counter()
        self.weight_stats = ParamStats.of(w)
        self.bias_stats = ParamStats.of(b)
        self.extremes: dict[str, list[tuple[int, int]]] = {}
        if layer_kind in ("Conv2D", "Dense"):
            for gran in SWAP_GRANULARITIES:
                pairs = []
                offset = 0
                for group in swap_groups(w, layer_kind, gran):
                    st = ParamStats.of(group)
                    if st.max != st.min:
                        pairs.append((offset + st.argmax, offset + st.argmin))
                    offset += group.size
                self.extremes[gran] = pairs
        self.profile_time = time.perf_counter() - t0
        self._views = {False: self.clean, True: self.corrupted}

    def select(self, fired: bool):
        self.active = "corrupted" if fired else "clean"
        return self._views[fired]

    @property
    def active_params(self):
        return self._views[self.active == "corrupted"]

    def reset(self) -> None:
        for dst, src in zip(self.corrupted, self.clean):
            np.copyto(dst, src)
        self._mirror = True


def select_buffer(buffer: DoubleBuffer, fired: bool):
    return buffer.select(fired)


def _mv(arr: np.ndarray) -> memoryview:
    return memoryview(arr.reshape(-1))


def prepare_payload(buffer: DoubleBuffer, attack: AttackConfig) -> float:
    """Fill the corrupted buffer for ``attack``; returns (and records) prep time in seconds."""
    if buffer.active == "corrupted":
        raise AttackError("cannot prepare while the corrupted buffer is active")
    kind = attack.kind
    if kind == "MaxMinSwap" and buffer.layer_kind not in ("Conv2D", "Dense"):
        raise AttackError(f"max-min swap undefined for layer kind {buffer.layer_kind!r}")
    cw, cb = buffer.clean
    dw, db = buffer.corrupted

    t0 = time.perf_counter()
    if kind == "MaxMinSwap":
        if not buffer._mirror:
            buffer.reset()
        src, dst = _mv(cw), _mv(dw)
        for imax, imin in buffer.extremes[attack.granularity]:
            dst[imax] = src[imin]
            dst[imin] = src[imax]
    else:
        seeds = (None, None)
        if kind in ("RandomScale", "StatisticalResample"):
            seeds = np.random.SeedSequence(attack.seed).spawn(2)
        pairs = ((cw, dw, buffer.weight_stats, seeds[0]), (cb, db, buffer.bias_stats, seeds[1]))
        for clean, out, stats, ss in pairs:
            src, dst = _mv(clean), _mv(out)
            n = len(src)
            if kind == "Scalar":
                s = float(np.float32(attack.scale))
                for i in range(n):
                    dst[i] = src[i] * s
            elif kind == "PolarityFlip":
                for i in range(n):
                    dst[i] = -src[i]
            elif kind == "RandomScale":
                mult = _mv(random_multipliers(n, ss, *attack.random_scale))
                for i in range(n):
                    dst[i] = src[i] * mult[i]
            else:
                # overwrite only: the moments were profiled at deployment
                vals = _mv(moment_matched_values(stats, ss))
                for i in range(n):
                    dst[i] = vals[i]
    elapsed = time.perf_counter() - t0

    buffer._mirror = False
    buffer.prep_time = elapsed
    buffer.prepared = attack
    return elapsed


def measure_swap_in(buffer: DoubleBuffer, reps: int = 10000) -> float:
    """Mean seconds per selector flip (clean -> corrupted -> clean counts as two)."""
    t0 = time.perf_counter()
    for _ in range(reps // 2):
        buffer.select(True)
        buffer.select(False)
    return (time.perf_counter() - t0) / (2 * (reps // 2))
