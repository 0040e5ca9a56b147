"""Operation-based CRDT payloads carried inside clock nodes.

Two data types share one operation stream: a grow-only set and a
last-writer-wins key-value map with tombstoned deletes.  Conflicts between
concurrent writes to the same key resolve by the clock's total order
(causal order first, then height/CID), so the materialized state is a pure
function of the DAG content and never depends on delivery order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

from .blocks import Cid, DecodeError
from .clock import ClockDag

BATCH_FORMAT_VERSION = 1
NONCE_LEN = 8

_LEN_BYTES = 4


class OpKind(IntEnum):
    GSET_ADD = 1
    KV_PUT = 2
    KV_DELETE = 3


@dataclass(frozen=True)
class Op:
    """One CRDT operation.

    ``key`` is the set element for GSET_ADD and the map key otherwise;
    ``value`` is only meaningful for KV_PUT.  The nonce is the issuing
    replica's 8-byte identifier, salting the payload so that the same
    logical operation issued by different replicas yields distinct CIDs.
    """

    kind: OpKind
    key: bytes
    value: bytes = b""
    nonce: bytes = b"\x00" * NONCE_LEN

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        if self.kind != OpKind.KV_PUT and self.value:
            raise ValueError(f"{OpKind(self.kind).name} carries no value")


@dataclass(frozen=True)
class OpBatch:
    """A non-empty list of ops issued together in one node.

    Order within the batch is the issuing replica's local program order;
    later ops on the same key supersede earlier ones.
    """

    ops: tuple[Op, ...]

    def __post_init__(self) -> None:
        if not self.ops:
            raise ValueError("batch must contain at least one op")
        object.__setattr__(self, "ops", tuple(self.ops))


def encode_batch(batch: OpBatch | Sequence[Op]) -> bytes:
    """Canonical batch bytes: version, u32 op count, then per op the kind
    byte, u32-length-prefixed key and value, and the 8-byte nonce."""
    ops = batch.ops if isinstance(batch, OpBatch) else tuple(batch)
    if not ops:
        raise ValueError("batch must contain at least one op")
    parts = [bytes([BATCH_FORMAT_VERSION]), len(ops).to_bytes(_LEN_BYTES, "big")]
    for op in ops:
        parts.append(bytes([op.kind]))
        parts.append(len(op.key).to_bytes(_LEN_BYTES, "big"))
        parts.append(op.key)
        parts.append(len(op.value).to_bytes(_LEN_BYTES, "big"))
        parts.append(op.value)
        parts.append(op.nonce)
    return b"".join(parts)


def decode_batch(data: bytes) -> OpBatch:
    if len(data) < 1 + _LEN_BYTES:
        raise DecodeError("truncated: missing batch header")
    if data[0] != BATCH_FORMAT_VERSION:
        raise DecodeError(f"unknown batch version {data[0]}")
    pos = 1
    count = int.from_bytes(data[pos : pos + _LEN_BYTES], "big")
    pos += _LEN_BYTES
    if count == 0:
        raise DecodeError("empty batch")
    ops = []
    for _ in range(count):
        if pos >= len(data):
            raise DecodeError("truncated: missing op kind")
        try:
            kind = OpKind(data[pos])
        except ValueError:
            raise DecodeError(f"unknown op kind {data[pos]}") from None
        pos += 1
        fields = []
        for name in ("key", "value"):
            if len(data) < pos + _LEN_BYTES:
                raise DecodeError(f"truncated: missing {name} length")
            flen = int.from_bytes(data[pos : pos + _LEN_BYTES], "big")
            pos += _LEN_BYTES
            if len(data) < pos + flen:
                raise DecodeError(f"truncated: incomplete {name}")
            fields.append(bytes(data[pos : pos + flen]))
            pos += flen
        if len(data) < pos + NONCE_LEN:
            raise DecodeError("truncated: incomplete nonce")
        nonce = bytes(data[pos : pos + NONCE_LEN])
        pos += NONCE_LEN
        key, value = fields
        if kind != OpKind.KV_PUT and value:
            raise DecodeError(f"{kind.name} must carry an empty value")
        ops.append(Op(kind=kind, key=key, value=value, nonce=nonce))
    if pos != len(data):
        raise DecodeError("trailing bytes after batch")
    return OpBatch(ops=tuple(ops))


@dataclass
class KvEntry:
    """Per-key record: current value, the node that wrote it, and whether
    that write was a delete (tombstone)."""

    value: bytes
    winner: Cid
    deleted: bool


@dataclass
class KvState:
    """Materialized CRDT state: the LWW map entries plus the grow-only set.

    ``gset_order`` records first-insertion order of set elements, which the
    simulator uses to audit causal consistency; it never affects reads or
    dumps.
    """

    entries: dict[bytes, KvEntry] = field(default_factory=dict)
    gset: set[bytes] = field(default_factory=set)
    gset_order: list[bytes] = field(default_factory=list, compare=False)

    def read_key(self, key: bytes) -> Optional[bytes]:
        entry = self.entries.get(key)
        if entry is None or entry.deleted:
            return None
        return entry.value

    def dump(self) -> str:
        """Deterministic text form used for byte-exact convergence checks.

        One ``kv`` line per key in ascending key order (tombstones render
        their value as ``-``), then one ``gset`` line per element in
        ascending element order.
        """
        lines = []
        for key in sorted(self.entries):
            entry = self.entries[key]
            value = "-" if entry.deleted else entry.value.hex()
            lines.append(f"kv {key.hex()} {value} {entry.winner.hex()}")
        for elem in sorted(self.gset):
            lines.append(f"gset {elem.hex()}")
        return "".join(line + "\n" for line in lines)


def apply_node(state: KvState, dag: ClockDag, node_cid: Cid) -> KvState:
    """Fold one node's batch into the state.

    Callers must apply nodes in an order consistent with ``topo_order``.
    Set adds always take effect; map writes take effect only if this node
    wins the total order against the key's current winner (re-applying the
    winning node itself keeps batch program order effective).  Applying
    the same node twice is a no-op.
    """
    node = dag.node(node_cid)
    batch = decode_batch(node.payload)
    for op in batch.ops:
        if op.kind == OpKind.GSET_ADD:
            if op.key not in state.gset:
                state.gset.add(op.key)
                state.gset_order.append(op.key)
            continue
        current = state.entries.get(op.key)
        if (
            current is None
            or current.winner == node_cid
            or dag.total_compare(node_cid, current.winner) > 0
        ):
            deleted = op.kind == OpKind.KV_DELETE
            state.entries[op.key] = KvEntry(
                value=b"" if deleted else op.value, winner=node_cid, deleted=deleted
            )
    return state


def materialize(dag: ClockDag) -> KvState:
    """Rebuild the full state from nothing but the DAG.

    Folds ``apply_node`` over all stored nodes in topological order; the
    result is a pure function of DAG content.
    """
    state = KvState()
    for cid in dag.topo_order(dag.cids()):
        apply_node(state, dag, cid)
    return state
