"""Coordinator: start one worker per plan node, feed images, collect predictions."""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .protocol import BlobFrame, FrameError, encode_frame, read_frame
from .transport import make_transport
from .worker import NodeConfig, NodeConfigError, NodeWorker

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class InferenceResult:
    inference_id: int
    predicted_class: int
    probabilities: np.ndarray | None
    ok: bool = True
    error: str | None = None


def place_attacks(plan, model, attacks) -> dict[int, object]:
    """Map each attack to the node that owns its target layer."""
    placed = {}
    for attack in attacks:
        try:
            layer = model.index_of(attack.target_layer)
        except KeyError:
            raise PipelineError(f"attack targets unknown layer {attack.target_layer!r}") from None
        node = plan.owner_of(layer)
        if node in placed:
            raise PipelineError(f"node {node} already carries an attack")
        placed[node] = attack
    return placed


class Pipeline:
    """A running set of node workers plus the coordinator's result listener.

    Use as a context manager; ``infer`` may be called repeatedly while the
    workers stay up (attack triggers keep their counters across calls).
    """

    def __init__(self, plan, model, attacks=(), transport="inproc", timeout: float = 10.0,
                 window: int = 8, stop_event: threading.Event | None = None):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.plan = plan
        self.timeout = timeout
        self.window = window
        self.transport = make_transport(transport) if isinstance(transport, str) else transport
        self._stop_requested = stop_event if stop_event is not None else threading.Event()
        self._closing = threading.Event()
        self._results: queue.Queue = queue.Queue()
        self._feed = None
        self.interrupted = False

        placed = place_attacks(plan, model, attacks)
        host = "127.0.0.1" if self.transport.name == "tcp" else "inproc"
        n = len(plan.assignments)
        self._result_listener = self.transport.listen(host, 0)
        listeners = [self.transport.listen(host, 0) for _ in range(n)]
        self.workers: list[NodeWorker] = []
        try:
            for a in plan.assignments:
                i = a.node_index
                cfg = NodeConfig(
                    node_index=i, num_nodes=n, listen=listeners[i].address,
                    layer_range=(a.lo, a.hi), trusted=plan.nodes[i].trusted,
                    next_hop=listeners[i + 1].address if i + 1 < n else None,
                    return_address=self._result_listener.address if i + 1 == n else None,
                    attack=placed.get(i),
                )
                model_slice = None if a.empty else model.slice(a.lo, a.hi)
                self.workers.append(NodeWorker(cfg, model_slice, self.transport, listeners[i]))
        except NodeConfigError as exc:
            for lst in listeners:
                lst.close()
            self._result_listener.close()
            raise PipelineError(str(exc)) from exc
        self._collector = threading.Thread(target=self._collect, name="collector", daemon=True)

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> "Pipeline":
        for w in self.workers:
            w.start()
        self._collector.start()
        return self

    def close(self) -> None:
        self._closing.set()
        if self._feed is not None:
            self._feed.close()
        for w in self.workers:
            w.stop()
        self._collector.join(5.0)
        self._result_listener.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def request_stop(self) -> None:
        """Stop feeding new images; in-flight ones are still collected."""
        self._stop_requested.set()

    # -- coordinator ----------------------------------------------------------

    def _collect(self) -> None:
        while not self._closing.is_set():
            try:
                stream = self._result_listener.accept(timeout=0.05)
            except TimeoutError:
                continue
            except OSError:
                return
            while not self._closing.is_set():
                try:
                    frame = read_frame(stream, timeout=0.05)
                except TimeoutError:
                    continue
                except FrameError as exc:
                    log.warning("coordinator: dropped result frame: %s", exc)
                    continue
                except (EOFError, OSError):
                    break
                self._results.put(frame)
            stream.close()

    def _send(self, frame: BlobFrame) -> str | None:
        try:
            if self._feed is None:
                self._feed = self.transport.connect(*self.workers[0].address)
            self._feed.send(encode_frame(frame))
        except OSError as exc:
            self._feed = None
            return f"first node unreachable: {exc}"
        return None

    def infer(self, images, start_id: int = 0, on_result=None) -> list[InferenceResult]:
        """Run ``images`` through the pipeline; results are ordered by inference id.

        Ids ``start_id, start_id + 1, ...`` are assigned in input order. Images
        not yet fed when ``request_stop`` is called are left out of the result.
        """
        images = np.asarray(images, dtype=np.float32)
        n = len(images)
        results: dict[int, InferenceResult] = {}
        pending: dict[int, float] = {}
        fed = 0
        expected_layer = self.plan.num_layers
        while fed < n or pending:
            while fed < n and len(pending) < self.window and not self._stop_requested.is_set():
                fid = start_id + fed
                err = self._send(BlobFrame(fid, 0, images[fed]))
                if err is None:
                    pending[fid] = time.monotonic() + self.timeout
                else:
                    results[fid] = InferenceResult(fid, -1, None, False, err)
                fed += 1
            if self._stop_requested.is_set() and fed < n:
                self.interrupted = True
                n = fed
            if not pending:
                continue
            wait = max(min(pending.values()) - time.monotonic(), 0.0)
            try:
                frame = self._results.get(timeout=wait)
            except queue.Empty:
                now = time.monotonic()
                for fid in [k for k, d in pending.items() if d <= now]:
                    del pending[fid]
                    results[fid] = InferenceResult(fid, -1, None, False,
                                                   f"timed out after {self.timeout:g}s")
                    log.warning("coordinator: inference %d timed out", fid)
                continue
            fid = frame.inference_id
            if fid not in pending:
                log.warning("coordinator: ignoring late or unknown result %d", fid)
                continue
            del pending[fid]
            if frame.layer_index != expected_layer:
                results[fid] = InferenceResult(fid, -1, None, False,
                                               f"result stopped at layer {frame.layer_index}")
            else:
                probs = frame.blob
                results[fid] = InferenceResult(fid, int(np.argmax(probs)), probs)
            if on_result is not None:
                on_result(results[fid])
        return [results[k] for k in sorted(results)]


def run_pipeline(plan, model, dataset_slice, attack_assignments=(), transport="inproc",
                 timeout: float = 10.0, window: int = 8) -> list[InferenceResult]:
    """Start workers, classify every image of ``dataset_slice``, shut down."""
    images = getattr(dataset_slice, "images", dataset_slice)
    if len(images) == 0:
        return []
    with Pipeline(plan, model, attack_assignments, transport, timeout, window) as pipe:
        return pipe.infer(images)


def score(results, labels, start_id: int = 0) -> tuple[float, int]:
    """Accuracy over successful inferences, and the number of failed ones."""
    labels = np.asarray(labels)
    good = [r for r in results if r.ok]
    failed = len(results) - len(good)
    if not good:
        return float("nan"), failed
    correct = sum(int(r.predicted_class == labels[r.inference_id - start_id]) for r in good)
    return correct / len(good), failed
