"""One pipeline node: receive a blob, run its layer slice, pass the result on."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .. import tensor_core as tc
from ..attack_engine import AttackConfig, DoubleBuffer, apply_trigger, prepare_payload
from .protocol import BlobFrame, FrameError, encode_frame, read_frame

log = logging.getLogger(__name__)

POLL_SECONDS = 0.05


class NodeConfigError(ValueError):
    pass


@dataclass
class NodeConfig:
    node_index: int
    num_nodes: int
    listen: tuple[str, int]
    layer_range: tuple[int, int]  # inclusive; (lo, lo - 1) marks a relay
    trusted: bool
    next_hop: tuple[str, int] | None = None
    # where the last node sends class probabilities
    return_address: tuple[str, int] | None = None
    attack: AttackConfig | None = None

    def __post_init__(self):
        lo, hi = self.layer_range
        if hi < lo - 1:
            raise NodeConfigError(f"node {self.node_index}: bad layer range {self.layer_range}")
        last = self.node_index == self.num_nodes - 1
        if last and self.next_hop is not None:
            raise NodeConfigError("the last node has no next hop")
        if not last and self.next_hop is None:
            raise NodeConfigError(f"node {self.node_index} needs a next hop")
        if self.attack is not None:
            if self.trusted:
                raise NodeConfigError(f"node {self.node_index} is trusted; attacks need an untrusted node")
            if self.node_index in (0, self.num_nodes - 1):
                raise NodeConfigError(f"node {self.node_index} is the first or last node, "
                                      f"which are always trusted")

    @property
    def is_relay(self) -> bool:
        return self.layer_range[1] < self.layer_range[0]

    @property
    def downstream(self) -> tuple[str, int] | None:
        return self.next_hop if self.next_hop is not None else self.return_address


@dataclass
class NodeStats:
    processed: int = 0
    dropped: int = 0
    errors: list[str] = field(default_factory=list)

    def record(self, message: str) -> None:
        self.dropped += 1
        if len(self.errors) < 100:
            self.errors.append(message)


class NodeWorker:
    """Sequential receive/compute/forward loop for one node.

    The worker holds a sub-graph containing only its own layers; nothing in
    its interface reaches the full model or any other node's parameters.
    """

    def __init__(self, config: NodeConfig, model_slice, transport, listener=None):
        lo, hi = config.layer_range
        if config.is_relay:
            if model_slice is not None and len(model_slice):
                raise NodeConfigError(f"relay node {config.node_index} was given layers")
        elif model_slice is None or len(model_slice) != hi - lo + 1:
            raise NodeConfigError(f"node {config.node_index}: slice does not cover layers {lo}..{hi}")
        self.config = config
        self._slice = None if config.is_relay else model_slice
        self._transport = transport
        self._listener = listener
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._upstream = None
        self._downstream = None
        self.stats = NodeStats()

        self.buffer: DoubleBuffer | None = None
        self.prep_time: float | None = None
        attack = config.attack
        if attack is not None:
            names = self.layer_names
            if attack.target_layer not in names:
                raise NodeConfigError(f"node {config.node_index} does not own layer {attack.target_layer!r}")
            spec = self._slice.layers[names.index(attack.target_layer)]
            if not spec.parametric:
                raise NodeConfigError(f"layer {attack.target_layer!r} has no parameters to attack")
            w, b = self._slice.params[attack.target_layer]
            self.buffer = DoubleBuffer(spec.kind, w, b)
            self.prep_time = prepare_payload(self.buffer, attack)

    # -- visibility surface -------------------------------------------------

    @property
    def layer_names(self) -> list[str]:
        return [] if self._slice is None else [s.name for s in self._slice.layers]

    def parameters(self, layer_name: str):
        """Clean parameters of one of this node's own layers."""
        if layer_name not in self.layer_names:
            raise KeyError(f"layer {layer_name!r} is not deployed on node {self.config.node_index}")
        return self._slice.params[layer_name]

    # -- compute --------------------------------------------------------------

    def process(self, frame: BlobFrame) -> BlobFrame:
        lo, hi = self.config.layer_range
        if frame.layer_index != lo:
            raise FrameError(f"node {self.config.node_index} expects layer {lo}, "
                             f"frame {frame.inference_id} carries layer {frame.layer_index}")
        if self._slice is None:
            return frame
        overrides = None
        if self.buffer is not None:
            fired = apply_trigger(self.config.attack.trigger, frame.inference_id)
            overrides = {self.config.attack.target_layer: self.buffer.select(fired)}
        out = tc.forward(self._slice, frame.blob, params=overrides)
        return BlobFrame(frame.inference_id, hi + 1, np.atleast_1d(out))

    # -- loop -----------------------------------------------------------------

    def bind(self):
        if self._listener is None:
            self._listener = self._transport.listen(*self.config.listen)
        return self._listener.address

    @property
    def address(self):
        return self._listener.address

    def start(self) -> None:
        self.bind()
        self._thread = threading.Thread(target=self.serve, name=f"node-{self.config.node_index}",
                                        daemon=True)
        self._thread.start()

    def serve(self) -> None:
        self.bind()
        while not self._stop.is_set():
            try:
                stream = self._listener.accept(timeout=POLL_SECONDS)
            except TimeoutError:
                continue
            except OSError:
                break
            self._upstream = stream
            self._serve_stream(stream)
            stream.close()
        self._close_downstream()

    def _serve_stream(self, stream) -> None:
        while not self._stop.is_set():
            try:
                frame = read_frame(stream, timeout=POLL_SECONDS)
            except TimeoutError:
                continue
            except FrameError as exc:
                log.warning("node %d: dropped undecodable frame: %s", self.config.node_index, exc)
                self.stats.record(str(exc))
                continue
            except (EOFError, OSError):
                return
            self._handle(frame)

    def _handle(self, frame: BlobFrame) -> None:
        try:
            out = self.process(frame)
        except (FrameError, tc.LayerError, tc.ShapeError) as exc:
            log.warning("node %d: dropped frame %d: %s", self.config.node_index, frame.inference_id, exc)
            self.stats.record(str(exc))
            return
        data = encode_frame(out)
        try:
            if self._downstream is None:
                self._downstream = self._transport.connect(*self.config.downstream)
            self._downstream.send(data)
        except OSError as exc:
            log.warning("node %d: downstream send failed for frame %d: %s",
                        self.config.node_index, frame.inference_id, exc)
            self.stats.record(f"downstream: {exc}")
            self._close_downstream()
            return
        self.stats.processed += 1

    def _close_downstream(self) -> None:
        if self._downstream is not None:
            try:
                self._downstream.close()
            except OSError:
                pass
            self._downstream = None

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        if self._listener is not None:
            self._listener.close()

    def kill(self) -> None:
        """Abrupt failure: drop the listener and every open stream at once."""
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        for stream in (self._upstream, self._downstream):
            if stream is not None:
                try:
                    stream.close()
                except OSError:
                    pass

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()


def serve_node(config: NodeConfig, model_slice, transport, listener=None) -> NodeWorker:
    """Start a worker for ``config`` in a background thread and return it."""
    worker = NodeWorker(config, model_slice, transport, listener)
    worker.start()
    return worker
