"""``trojan-pipeline`` command line: train, partition, run, sweep, report.

Settings resolve as built-in defaults, then the ``--config`` YAML document,
then explicit flags. Failures print one JSON line on stderr::

    {"error": "missing_file", "exit_code": 4, "message": "..."}
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

import yaml

from . import __version__
from .attack_engine import AttackConfig, AttackError, TriggerSpec
from .evaluation import (
    SWEEP_ORDER,
    SweepInterrupted,
    attack_sweep,
    emit_tables,
    merge_reports,
    normalize_kinds,
    parse_csv,
    write_report,
)
from .model_zoo import (
    IDXError,
    ModelFormatError,
    build_lenet,
    default_data_root,
    evaluate,
    held_out_slice,
    load_mnist,
    load_model,
    save_model,
    synthetic_digits,
    train,
)
from .node_runtime import Pipeline, PipelineError, score
from .partitioner import NodeCapability, PartitionError, default_nodes, partition

log = logging.getLogger("trojan_pipeline")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_PARTITION = 5
EXIT_DATA = 6
EXIT_RUNTIME = 7
EXIT_INTERRUPTED = 130

DEFAULTS = {
    "model": "lenet",
    "weights": None,
    "data": None,
    "train_size": 10000,
    "test_size": 1000,
    "epochs": 2,
    "lr": 0.05,
    "batch": 16,
    "seed": 42,
    "nodes": 3,
    "attacks": list(SWEEP_ORDER),
    "layers": None,
    "trigger": "always",
    "transport": "inproc",
    "granularity": "kernel",
    "random_scale": [0.5, 0.15],
    "timeout": 30.0,
    "limit": None,
    "out": ".",
}


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def _config_error(message: str) -> CliError:
    return CliError("invalid_config", EXIT_CONFIG, message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _as_list(value):
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError("missing_file", EXIT_MISSING, f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise _config_error(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise _config_error(f"{path}: top level must be a mapping")
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise _config_error(f"{path}: unknown keys {unknown}")
    return doc


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    """Type-check every setting up front so no command fails half-way on a typo."""
    if cfg["model"] != "lenet":
        raise _config_error(f"model must be 'lenet', got {cfg['model']!r}")
    for key in ("train_size", "test_size", "epochs", "batch", "seed"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool) or cfg[key] < 0:
            raise _config_error(f"{key} must be a non-negative integer, got {cfg[key]!r}")
    if cfg["batch"] < 1:
        raise _config_error("batch must be >= 1")
    if not isinstance(cfg["lr"], (int, float)) or cfg["lr"] < 0:
        raise _config_error(f"lr must be a non-negative number, got {cfg['lr']!r}")
    if not isinstance(cfg["timeout"], (int, float)) or cfg["timeout"] <= 0:
        raise _config_error(f"timeout must be positive, got {cfg['timeout']!r}")
    if cfg["limit"] is not None and (not isinstance(cfg["limit"], int) or cfg["limit"] < 0):
        raise _config_error(f"limit must be a non-negative integer, got {cfg['limit']!r}")
    if cfg["transport"] not in ("inproc", "tcp"):
        raise _config_error(f"transport must be inproc or tcp, got {cfg['transport']!r}")
    if cfg["granularity"] not in ("kernel", "filter"):
        raise _config_error(f"granularity must be kernel or filter, got {cfg['granularity']!r}")
    rs = cfg["random_scale"]
    if (not isinstance(rs, (list, tuple)) or len(rs) != 2
            or not all(isinstance(v, (int, float)) for v in rs) or not (0 < rs[0] < 1 and rs[1] > 0)):
        raise _config_error(f"random_scale must be [mean, std] with 0 < mean < 1, std > 0; got {rs!r}")
    try:
        TriggerSpec.parse(str(cfg["trigger"]))
    except AttackError as exc:
        raise _config_error(str(exc)) from exc
    cfg["nodes"] = _parse_nodes(cfg["nodes"])
    cfg["attacks"] = _as_list(cfg["attacks"]) or []
    try:
        normalize_kinds([a.split(":")[0] for a in cfg["attacks"]])
    except ValueError as exc:
        raise _config_error(str(exc)) from exc
    cfg["layers"] = _as_list(cfg["layers"])
    return cfg


def _parse_nodes(value) -> list[NodeCapability]:
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 1:
            raise _config_error("nodes must be >= 1")
        return default_nodes(value)
    if isinstance(value, str) and value.isdigit():
        return _parse_nodes(int(value))
    if isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
        allowed = {"compute_weight", "memory_limit_bytes", "trusted"}
        for v in value:
            if set(v) - allowed:
                raise _config_error(f"unknown node keys {sorted(set(v) - allowed)}")
        try:
            return [NodeCapability.from_dict(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise _config_error(f"bad node capability: {exc}") from exc
    raise _config_error(f"nodes must be a count or a list of capability mappings, got {value!r}")


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _datasets(cfg):
    """(train, held-out test) sets from MNIST IDX files or the synthetic generator."""
    if cfg["data"] == "synthetic":
        return (synthetic_digits(cfg["train_size"], cfg["seed"]),
                synthetic_digits(cfg["test_size"], cfg["seed"] + 1))
    root = Path(cfg["data"]) if cfg["data"] else default_data_root()
    if root is None or not root.exists():
        raise CliError("missing_file", EXIT_MISSING,
                       f"MNIST root not found ({root}); set --data, TROJAN_PIPELINE_DATA, or use --data synthetic")
    try:
        train_set = load_mnist(root, "train").head(cfg["train_size"])
        test_set = held_out_slice(load_mnist(root, "test"), cfg["test_size"], cfg["seed"])
    except FileNotFoundError as exc:
        raise CliError("missing_file", EXIT_MISSING, str(exc)) from exc
    except IDXError as exc:
        raise CliError("bad_data", EXIT_DATA, str(exc)) from exc
    return train_set, test_set


def _test_set(cfg):
    if cfg["data"] == "synthetic":
        return synthetic_digits(cfg["test_size"], cfg["seed"] + 1)
    return _datasets(cfg)[1]


def _load_weights(cfg):
    path = cfg["weights"]
    if path is None:
        raise _config_error("this command needs --weights (a trained model file)")
    if not Path(path).is_file():
        raise CliError("missing_file", EXIT_MISSING, f"weights file not found: {path}")
    try:
        return load_model(path)
    except ModelFormatError as exc:
        raise CliError("bad_model_file", EXIT_DATA, str(exc)) from exc


def _plan(model, cfg):
    try:
        return partition(model, cfg["nodes"])
    except PartitionError as exc:
        raise CliError("infeasible_partition", EXIT_PARTITION, str(exc)) from exc


@contextlib.contextmanager
def _interrupt_event():
    """First SIGINT sets the yielded event (drain, then stop); a second one aborts."""
    event = threading.Event()
    if threading.current_thread() is not threading.main_thread():
        yield event
        return

    def handler(signum, frame):
        if event.is_set():
            raise KeyboardInterrupt
        print("interrupt: draining in-flight inferences", file=sys.stderr)
        event.set()

    previous = signal.signal(signal.SIGINT, handler)
    try:
        yield event
    finally:
        signal.signal(signal.SIGINT, previous)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg) -> int:
    train_set, test_set = _datasets(cfg)
    history: list[float] = []
    t0 = time.perf_counter()
    model = train(build_lenet(cfg["seed"]), train_set, epochs=cfg["epochs"], lr=cfg["lr"],
                  batch=cfg["batch"], seed=cfg["seed"], history=history)
    elapsed = time.perf_counter() - t0
    acc = evaluate(model, test_set)
    out = _out_dir(cfg)
    weights = out / "lenet.tpw"
    save_model(model, weights)
    record = {
        "weights": str(weights), "held_out_accuracy": acc, "epoch_losses": history,
        "seconds": elapsed, "epochs": cfg["epochs"], "lr": cfg["lr"], "batch": cfg["batch"],
        "seed": cfg["seed"], "data": cfg["data"] or "mnist",
        "train_size": len(train_set), "train_fingerprint": train_set.fingerprint(),
        "test_size": len(test_set), "test_fingerprint": test_set.fingerprint(),
    }
    (out / "train_log.json").write_text(json.dumps(record, indent=2))
    print(f"held-out accuracy {acc:.4f} ({len(test_set)} images); weights -> {weights}")
    return EXIT_OK


def cmd_partition(cfg) -> int:
    model = _load_weights(cfg) if cfg["weights"] else build_lenet(cfg["seed"])
    plan = _plan(model, cfg)
    print(plan.describe())
    if cfg["out"] != ".":
        path = Path(cfg["out"])
        if path.suffix != ".json":
            path = _out_dir(cfg) / "plan.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(plan.to_json())
        print(f"plan -> {path}")
    return EXIT_OK


def _attack_assignments(cfg) -> list[AttackConfig]:
    layers = cfg["layers"] or []
    if not layers:
        return []
    if len(cfg["attacks"]) != 1:
        raise _config_error("run takes exactly one --attacks kind when --layers is given")
    trigger = TriggerSpec.parse(str(cfg["trigger"]))
    kind, _, scale = cfg["attacks"][0].partition(":")
    out = []
    for layer in layers:
        try:
            out.append(AttackConfig(kind, layer, trigger, scale=float(scale) if scale else None,
                                    seed=cfg["seed"], granularity=cfg["granularity"],
                                    random_scale=tuple(cfg["random_scale"])))
        except (AttackError, ValueError) as exc:
            raise _config_error(str(exc)) from exc
    return out


def cmd_run(cfg) -> int:
    model = _load_weights(cfg)
    plan = _plan(model, cfg)
    test_set = _test_set(cfg)
    if cfg["limit"] is not None:
        test_set = test_set.head(cfg["limit"])
    attacks = _attack_assignments(cfg)
    try:
        with _interrupt_event() as stop, \
                Pipeline(plan, model, attacks, cfg["transport"], cfg["timeout"], stop_event=stop) as pipe:
            results = pipe.infer(test_set.images)
    except PipelineError as exc:
        raise CliError("pipeline_error", EXIT_RUNTIME, str(exc)) from exc
    acc, failed = score(results, test_set.labels)
    out = _out_dir(cfg) / "predictions.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("inference_id", "predicted_class", "label", "ok", "error"))
        for r in results:
            writer.writerow((r.inference_id, r.predicted_class, int(test_set.labels[r.inference_id]),
                             int(r.ok), r.error or ""))
    print(f"accuracy {acc:.4f} over {len(results) - failed} images, {failed} failed; predictions -> {out}")
    return EXIT_INTERRUPTED if stop.is_set() else EXIT_OK


def cmd_sweep(cfg) -> int:
    model = _load_weights(cfg)
    plan = _plan(model, cfg)
    test_set = _test_set(cfg)
    try:
        with _interrupt_event() as stop:
            report = attack_sweep(
                model, plan, test_set, cfg["attacks"], cfg["trigger"], layers=cfg["layers"],
                seed=cfg["seed"], transport=cfg["transport"], timeout=cfg["timeout"],
                granularity=cfg["granularity"], model_name=cfg["model"], stop_event=stop,
                random_scale=tuple(cfg["random_scale"]),
                extra_metadata={"weights": str(cfg["weights"]), "data": cfg["data"] or "mnist",
                                "nodes": [n.to_dict() for n in cfg["nodes"]]},
            )
    except SweepInterrupted:
        print("sweep interrupted; no report written", file=sys.stderr)
        return EXIT_INTERRUPTED
    except ValueError as exc:
        raise _config_error(str(exc)) from exc
    except PipelineError as exc:
        raise CliError("pipeline_error", EXIT_RUNTIME, str(exc)) from exc
    paths = write_report(report, _out_dir(cfg))
    print(emit_tables(report, "markdown").split("## Metadata")[0].rstrip())
    for p in paths:
        print(f"report -> {p}")
    return EXIT_OK


def cmd_report(paths, out=None, fmt="markdown") -> int:
    reports = []
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise CliError("missing_file", EXIT_MISSING, f"report not found: {path}")
        try:
            reports.append(parse_csv(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as exc:
            raise CliError("bad_report", EXIT_DATA, f"{path}: {exc}") from exc
    merged = reports[0] if len(reports) == 1 else merge_reports(reports)
    text = emit_tables(merged, fmt)
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
        print(f"report -> {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors also follow the one-line JSON error convention."""

    def error(self, message):
        print(json.dumps({"error": "usage", "exit_code": EXIT_USAGE, "message": f"{self.prog}: {message}"}),
              file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _mean_std(text: str) -> list[float]:
    try:
        mean, std = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MEAN,STD, got {text!r}") from None
    return [mean, std]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment document; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="seed for init, shuffling, slices and attacks (default 42)")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--data", help="MNIST IDX directory, or 'synthetic' (default: $TROJAN_PIPELINE_DATA)")
    common.add_argument("--test-size", dest="test_size", type=int, help="held-out images (default 1000)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    pipeline = _Parser(add_help=False)
    pipeline.add_argument("--weights", help="trained model file written by 'train'")
    pipeline.add_argument("--nodes", help="node count (first and last trusted); config may give a capability list")
    pipeline.add_argument("--transport", choices=("inproc", "tcp"), help="in-memory channels or loopback TCP")
    pipeline.add_argument("--timeout", type=float, help="per-inference timeout in seconds (default 30)")

    attacks = _Parser(add_help=False)
    attacks.add_argument("--attacks", help="comma list of scalar,random,mean,flip,swap "
                                           "('run' takes one kind; scalar needs a scale, e.g. scalar:1.4)")
    attacks.add_argument("--layers", help="comma list of target layers, e.g. Conv3,FC1")
    attacks.add_argument("--trigger", help="always | never | periodic:K:P | window:START:END")
    attacks.add_argument("--granularity", choices=("kernel", "filter"),
                         help="max-min swap groups for conv layers (default kernel)")
    attacks.add_argument("--random-scale", dest="random_scale", type=_mean_std, metavar="MEAN,STD",
                         help="truncated-normal multiplier distribution (default 0.5,0.15)")

    parser = _Parser(prog="trojan-pipeline",
                     description="Distributed CNN inference with parameter-tampering attacks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train LeNet and save weights")
    p.add_argument("--epochs", type=int, help="default 2")
    p.add_argument("--lr", type=float, help="default 0.05")
    p.add_argument("--batch", type=int, help="default 16")
    p.add_argument("--train-size", dest="train_size", type=int, help="training images (default 10000)")

    p = sub.add_parser("partition", parents=[common], help="print the layer-to-node plan")
    p.add_argument("--weights", help="model file (default: untrained LeNet, same shapes)")
    p.add_argument("--nodes", help="node count (first and last trusted)")

    p = sub.add_parser("run", parents=[common, pipeline, attacks],
                       help="classify held-out images through the node pipeline")
    p.add_argument("--limit", type=int, help="only the first N held-out images")

    sub.add_parser("sweep", parents=[common, pipeline, attacks],
                   help="accuracy and timing for every attack on every layer")

    p = sub.add_parser("report", help="render or merge sweep CSV reports")
    p.add_argument("paths", nargs="+", help="report CSV files")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", help="write here instead of stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.paths, args.out, args.format)
        cfg = resolve_config(args)
        return {"train": cmd_train, "partition": cmd_partition, "run": cmd_run,
                "sweep": cmd_sweep}[args.command](cfg)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "exit_code": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print(json.dumps({"error": "interrupted", "exit_code": EXIT_INTERRUPTED,
                          "message": "interrupted"}), file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
