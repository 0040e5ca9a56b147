"""Replicated CRDTs carried on a content-addressed DAG clock.

The DAG doubles as a logical clock — descendancy is happened-before —
so operation payloads need no version vectors and replicas converge over
transports that drop, reorder, duplicate or corrupt messages.
"""

from .blocks import (
    BlockStore,
    Cid,
    ClockNode,
    DecodeError,
    DirectoryBlockStore,
    MemoryBlockStore,
    compute_cid,
    decode_node,
    encode_node,
    verify_block,
)
from .clock import CausalRelation, ClockDag, UnknownCid
from .payloads import (
    KvEntry,
    KvState,
    Op,
    OpBatch,
    OpKind,
    apply_node,
    decode_batch,
    encode_batch,
    materialize,
)
from .replica import (
    BroadcastMsg,
    Broadcaster,
    DagSyncer,
    FetchFailed,
    FetchJob,
    Replica,
    ReplicaConfig,
    SyncOutcome,
    inject_shortcut_links,
)
from .rng import Rng
from .sim import PartitionWindow, SimConfig, SimReport, Simulator, cold_sync, corrupt, run

__version__ = "0.1.0"

__all__ = [
    "BlockStore",
    "BroadcastMsg",
    "Broadcaster",
    "CausalRelation",
    "Cid",
    "ClockDag",
    "ClockNode",
    "DagSyncer",
    "DecodeError",
    "DirectoryBlockStore",
    "FetchFailed",
    "FetchJob",
    "KvEntry",
    "KvState",
    "MemoryBlockStore",
    "Op",
    "OpBatch",
    "OpKind",
    "PartitionWindow",
    "Replica",
    "ReplicaConfig",
    "Rng",
    "SimConfig",
    "SimReport",
    "Simulator",
    "SyncOutcome",
    "UnknownCid",
    "apply_node",
    "cold_sync",
    "compute_cid",
    "corrupt",
    "decode_batch",
    "decode_node",
    "encode_batch",
    "encode_node",
    "inject_shortcut_links",
    "materialize",
    "run",
    "verify_block",
]
