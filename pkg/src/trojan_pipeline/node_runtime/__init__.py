from .pipeline import InferenceResult, Pipeline, PipelineError, place_attacks, run_pipeline, score
from .protocol import (
    MAGIC,
    VERSION,
    BadMagic,
    BadVersion,
    BlobFrame,
    ChecksumMismatch,
    FrameError,
    MalformedFrame,
    TruncatedFrame,
    decode_frame,
    encode_frame,
    read_frame,
)
from .transport import InProcTransport, StreamClosed, TcpTransport, make_transport
from .worker import NodeConfig, NodeConfigError, NodeStats, NodeWorker, serve_node

__all__ = [
    "MAGIC", "VERSION", "BadMagic", "BadVersion", "BlobFrame", "ChecksumMismatch", "FrameError",
    "InProcTransport", "InferenceResult", "MalformedFrame", "NodeConfig", "NodeConfigError",
    "NodeStats", "NodeWorker", "Pipeline", "PipelineError", "StreamClosed", "TcpTransport",
    "TruncatedFrame", "decode_frame", "encode_frame", "make_transport", "place_attacks",
    "read_frame", "run_pipeline", "score", "serve_node",
]
