"""Running replicas over TCP: framing, persistence, server and client."""
from __future__ import annotations

from .client import SubmitTimeout, client_submit, cluster_status, submit_async
from .cluster import ClusterConfig, init_local_cluster, load_cluster
from .node import FatalError, ReplicaServer, replica_main
from .storage import CorruptLog, DurableLog
from .wire import FrameDecoder, NeedMoreBytes, ProtocolError, decode_frame, encode_frame

__all__ = [
    "ClusterConfig", "CorruptLog", "DurableLog", "FatalError", "FrameDecoder", "NeedMoreBytes",
    "ProtocolError", "ReplicaServer", "SubmitTimeout", "client_submit", "cluster_status",
    "decode_frame", "encode_frame", "init_local_cluster", "load_cluster", "replica_main",
    "submit_async",
]
