"""Layer-by-layer attack sweep through the node pipeline, and report rendering."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .attack_engine import (
    KIND_ALIASES,
    KIND_LABELS,
    RANDOM_SCALE_MEAN,
    RANDOM_SCALE_STD,
    SCALAR_SWEEP,
    AttackConfig,
    DoubleBuffer,
    TriggerSpec,
    measure_swap_in,
    prepare_payload,
)
from .node_runtime import Pipeline, score
from .partitioner import NodeCapability, PartitionError, PartitionPlan, build_plan, model_costs

log = logging.getLogger(__name__)

ACCURACY_COLUMNS = ("clean",) + tuple(f"{s:g}" for s in SCALAR_SWEEP) + ("Random", "Mean", "Flip", "Swap")
TIMING_COLUMNS = ("Scalar", "Random", "Mean", "Flip", "Swap")
SWEEP_ORDER = ("Scalar", "RandomScale", "StatisticalResample", "PolarityFlip", "MaxMinSwap")
TIMING_REPS = 5
SKIP = "n/a"


class SweepInterrupted(RuntimeError):
    pass


@dataclass
class EvalReport:
    model_name: str
    layers: list[str]
    accuracy: dict[str, dict[str, float | None]]
    timing: dict[str, dict[str, float | None]]
    metadata: dict = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)  # "table/layer/column" -> reason

    @property
    def accuracy_columns(self) -> list[str]:
        present = {c for row in self.accuracy.values() for c in row}
        return [c for c in ACCURACY_COLUMNS if c in present]

    @property
    def timing_columns(self) -> list[str]:
        present = {c for row in self.timing.values() for c in row}
        return [c for c in TIMING_COLUMNS if c in present]

    def cell(self, layer: str, column: str) -> float | None:
        return self.accuracy[layer][column]

    def column_mean(self, column: str) -> float:
        vals = [row[column] for row in self.accuracy.values() if row.get(column) is not None]
        return float(np.mean(vals)) if vals else float("nan")


def normalize_kinds(kinds) -> list[str]:
    out = []
    for k in kinds:
        canon = KIND_ALIASES.get(str(k).lower(), k)
        if canon not in SWEEP_ORDER:
            raise ValueError(f"unknown attack kind {k!r}")
        if canon not in out:
            out.append(canon)
    return [k for k in SWEEP_ORDER if k in out]


def cell_seed(base_seed: int, kind: str, layer: str) -> int:
    """Per-cell seed that does not depend on which other cells are swept."""
    return zlib.crc32(f"{base_seed}:{kind}:{layer}".encode())


def attackable_plan(model, plan: PartitionPlan, layer_index: int) -> tuple[PartitionPlan, bool]:
    """``plan`` if an untrusted interior node owns the layer, else a head/target/tail re-plan.

    The re-plan puts layers before the target on a trusted head node (a relay
    when the target is layer 0), the target alone on an untrusted node, and
    the rest on a trusted tail. Raises PartitionError if memory limits forbid it.
    """
    n = len(plan.assignments)
    owner = plan.owner_of(layer_index)
    if not plan.nodes[owner].trusted and 0 < owner < n - 1:
        return plan, False
    untrusted = [nd for nd in plan.nodes if not nd.trusted]
    middle = untrusted[0] if untrusted else NodeCapability(trusted=False)
    head, tail = plan.nodes[0], plan.nodes[-1]
    nodes = [NodeCapability(head.compute_weight, head.memory_limit_bytes, True),
             NodeCapability(middle.compute_weight, middle.memory_limit_bytes, False),
             NodeCapability(tail.compute_weight, tail.memory_limit_bytes, True)]
    costs = model_costs(model)
    names = [s.name for s in model.layers]
    replanned = build_plan(costs, nodes, [layer_index - 1, layer_index, len(costs) - 1], names)
    replanned.validate(costs)
    return replanned, True


def _cells(kinds, layer: str, base_seed: int, trigger: TriggerSpec, granularity: str,
           random_scale=(RANDOM_SCALE_MEAN, RANDOM_SCALE_STD)):
    for kind in kinds:
        if kind == "Scalar":
            for s in SCALAR_SWEEP:
                yield f"{s:g}", AttackConfig("Scalar", layer, trigger, scale=s)
        else:
            seed = cell_seed(base_seed, kind, layer) if kind in ("RandomScale", "StatisticalResample") else None
            yield KIND_LABELS[kind], AttackConfig(kind, layer, trigger, seed=seed, granularity=granularity,
                                                  random_scale=random_scale)


def time_preparation(layer_kind: str, weights, bias, attack: AttackConfig,
                     reps: int = TIMING_REPS) -> float:
    """Median seconds over ``reps`` preparations, each on a freshly deployed buffer."""
    times = []
    for _ in range(reps):
        buf = DoubleBuffer(layer_kind, weights, bias)
        times.append(prepare_payload(buf, attack))
    return statistics.median(times)


def attack_sweep(model, plan: PartitionPlan, test_slice, attack_kinds=SWEEP_ORDER, trigger=None,
                 layers=None, seed: int = 42, transport="inproc", timeout: float = 30.0,
                 granularity: str = "kernel", model_name: str = "lenet", timing: bool = True,
                 extra_metadata: dict | None = None, stop_event=None,
                 random_scale=(RANDOM_SCALE_MEAN, RANDOM_SCALE_STD)) -> EvalReport:
    """Accuracy of every (attack, parametric layer) cell through the distributed pipeline.

    Attacks run on whichever untrusted node owns the target layer, re-planning
    when that node is trusted. ``trigger`` defaults to Always. Setting
    ``stop_event`` drains the running cell and raises SweepInterrupted.
    """
    if len(test_slice) == 0:
        raise ValueError("empty test slice")
    kinds = normalize_kinds(attack_kinds)
    trigger_text = trigger if isinstance(trigger, str) else (trigger.describe() if trigger else "always")
    all_layers = model.parametric_layers
    if layers is None:
        layers = all_layers
    unknown = [name for name in layers if name not in all_layers]
    if unknown:
        raise ValueError(f"not parametric layers of this model: {unknown}")
    layers = [name for name in all_layers if name in layers]
    labels = test_slice.labels

    def run(run_plan, attacks):
        with Pipeline(run_plan, model, attacks, transport, timeout, stop_event=stop_event) as pipe:
            result = score(pipe.infer(test_slice.images), labels)
        if stop_event is not None and stop_event.is_set():
            raise SweepInterrupted("sweep interrupted")
        return result

    clean, clean_failed = run(plan, [])
    failed = {"clean": clean_failed}
    accuracy = {name: {"clean": clean} for name in layers}
    timing_tab: dict[str, dict] = {name: {} for name in layers}
    skipped: dict[str, str] = {}
    replans: dict[str, list] = {}
    seeds: dict[str, int] = {}
    swap_in: dict[str, float] = {}

    for name in layers:
        idx = model.index_of(name)
        spec = model.layers[idx]
        try:
            run_plan, moved = attackable_plan(model, plan, idx)
            reason = None
        except PartitionError as exc:
            run_plan, moved, reason = None, False, f"no feasible plan puts {name} on an untrusted node: {exc}"
        if moved:
            replans[name] = [[a.lo, a.hi] for a in run_plan.assignments]

        for column, attack in _cells(kinds, name, seed, TriggerSpec.parse(trigger_text), granularity,
                                     random_scale):
            if attack.seed is not None:
                seeds[f"{name}/{column}"] = attack.seed
            if reason is not None:
                accuracy[name][column] = None
                skipped[f"accuracy/{name}/{column}"] = reason
                continue
            acc, n_failed = run(run_plan, [attack])
            accuracy[name][column] = acc
            failed[f"{name}/{column}"] = n_failed
            log.info("%s %s: %.4f", name, column, acc)

        if timing:
            w, b = model.params[name]
            for kind in kinds:
                col = KIND_LABELS[kind]
                probe = next(a for c, a in _cells([kind], name, seed, TriggerSpec(), granularity,
                                                  random_scale))
                timing_tab[name][col] = 1e3 * time_preparation(spec.kind, w, b, probe)
            swap_in[name] = 1e3 * measure_swap_in(DoubleBuffer(spec.kind, w, b))

    metadata = {
        "model": model_name,
        "seed": seed,
        "cell_seeds": seeds,
        "trigger": trigger_text,
        "attack_kinds": kinds,
        "swap_granularity": granularity,
        "random_scale_mean_std": list(random_scale),
        "scalar_sweep": list(SCALAR_SWEEP),
        "test_slice_size": len(test_slice),
        "test_slice_fingerprint": test_slice.fingerprint(),
        "plan": plan.to_dict(),
        "replans": replans,
        "failed_inferences": failed,
        "transport": transport if isinstance(transport, str) else transport.name,
        "timing_reps": TIMING_REPS,
        "timing_unit": "ms",
        "swap_in_ms": swap_in,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    if not timing:
        timing_tab = {name: {} for name in layers}
    return EvalReport(model_name, layers, accuracy, timing_tab, metadata, skipped)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _csv_rows(report: EvalReport):
    for table, matrix, columns in (("accuracy", report.accuracy, report.accuracy_columns),
                                   ("timing_ms", report.timing, report.timing_columns)):
        for layer in report.layers:
            for col in columns:
                if col not in matrix[layer]:
                    continue
                value = matrix[layer][col]
                note = report.skipped.get(f"{table.split('_')[0]}/{layer}/{col}", "")
                yield table, layer, col, "" if value is None else repr(float(value)), note
    for key in sorted(report.metadata):
        yield "metadata", key, "", json.dumps(report.metadata[key], sort_keys=True), ""


def emit_tables(report: EvalReport, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(("table", "row", "column", "value", "note"))
        writer.writerows(_csv_rows(report))
        return buf.getvalue()
    if fmt in ("markdown", "md"):
        return _markdown(report)
    raise ValueError(f"unknown format {fmt!r} (csv or markdown)")


def _markdown(report: EvalReport) -> str:
    notes: list[str] = []

    def table(title, matrix, columns, key, fmt):
        lines = [f"## {title}", "", "| Layer | " + " | ".join(columns) + " |",
                 "|---" * (len(columns) + 1) + "|"]
        for layer in report.layers:
            cells = []
            for col in columns:
                value = matrix[layer].get(col)
                if value is None:
                    reason = report.skipped.get(f"{key}/{layer}/{col}", "not measured")
                    if reason not in notes:
                        notes.append(reason)
                    cells.append(f"{SKIP}[^{notes.index(reason) + 1}]")
                else:
                    cells.append(fmt(value))
            lines.append(f"| {layer} | " + " | ".join(cells) + " |")
        return lines

    out = [f"# Attack sweep: {report.model_name}", ""]
    out += table("Accuracy (%)", report.accuracy, report.accuracy_columns, "accuracy",
                 lambda v: f"{100 * v:.1f}")
    if report.timing_columns:
        out += [""] + table("Payload preparation time (ms, median)", report.timing,
                            report.timing_columns, "timing", lambda v: f"{v:.3f}")
    out += ["", "## Metadata", "", "```json", json.dumps(report.metadata, indent=2, sort_keys=True), "```"]
    if notes:
        out.append("")
        out += [f"[^{i + 1}]: skipped: {reason}" for i, reason in enumerate(notes)]
    return "\n".join(out) + "\n"


def parse_csv(text: str) -> EvalReport:
    """Rebuild a report from ``emit_tables(report, "csv")`` output."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["table", "row", "column", "value", "note"]:
        raise ValueError(f"not a sweep report CSV (header {reader.fieldnames})")
    layers: list[str] = []
    accuracy: dict = {}
    timing_tab: dict = {}
    metadata: dict = {}
    skipped: dict = {}
    for rec in reader:
        table, row, col, value, note = (rec[k] for k in ("table", "row", "column", "value", "note"))
        if table == "metadata":
            metadata[row] = json.loads(value)
            continue
        if table not in ("accuracy", "timing_ms"):
            raise ValueError(f"unknown table {table!r}")
        if row not in layers:
            layers.append(row)
        target = accuracy if table == "accuracy" else timing_tab
        target.setdefault(row, {})[col] = float(value) if value else None
        if note:
            skipped[f"{table.split('_')[0]}/{row}/{col}"] = note
    for layer in layers:
        accuracy.setdefault(layer, {})
        timing_tab.setdefault(layer, {})
    return EvalReport(metadata.get("model", "model"), layers, accuracy, timing_tab, metadata, skipped)


def merge_reports(reports: list[EvalReport]) -> EvalReport:
    """Overlay reports in order; later cells win. Layer order follows first appearance."""
    if not reports:
        raise ValueError("nothing to merge")
    layers: list[str] = []
    accuracy: dict = {}
    timing_tab: dict = {}
    skipped: dict = {}
    for rep in reports:
        for layer in rep.layers:
            if layer not in layers:
                layers.append(layer)
            accuracy.setdefault(layer, {}).update(rep.accuracy.get(layer, {}))
            timing_tab.setdefault(layer, {}).update(rep.timing.get(layer, {}))
        skipped.update(rep.skipped)
    metadata = {"merged_from": [rep.metadata for rep in reports]}
    return EvalReport(reports[0].model_name, layers, accuracy, timing_tab, metadata, skipped)


def write_report(report: EvalReport, out_dir, formats=("csv", "md"), stamp: str | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = stamp or time.strftime("%Y%m%dT%H%M%S")
    paths = []
    for fmt in formats:
        ext = "md" if fmt in ("md", "markdown") else fmt
        path = out_dir / f"report_{report.model_name}_{stamp}.{ext}"
        path.write_text(emit_tables(report, fmt), encoding="utf-8", newline="")
        paths.append(path)
    return paths
