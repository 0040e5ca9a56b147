"""The replica engine: issuing events and pull-based anti-entropy.

A replica announces only the CID of its new root; receivers walk down
from that root, fetching the nodes they are missing through a DagSyncer,
verifying each block against its CID, and pruning any branch whose head
is already stored locally.  Fetched nodes are applied oldest-first, then
the root set is merged.  A root whose history cannot be fetched is parked
and retried on later broadcasts, never fatal: the next reachable root
that covers it heals the gap automatically.

Fetching is factored into :class:`FetchJob`, an explicit state machine,
so the same walk drives both the synchronous :meth:`Replica.fetch_missing`
(used with a blocking DagSyncer) and the tick-based network simulator
(which feeds replies in as events).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappush, heappop
from typing import Optional, Protocol, Sequence

from .blocks import Cid, ClockNode, DecodeError, decode_node, verify_block
from .clock import ClockDag
from .payloads import Op, OpKind, KvState, apply_node, encode_batch

MSG_FORMAT_VERSION = 1
REPLICA_ID_LEN = 8


class DagSyncer(Protocol):
    """Fetches remote blocks by CID and makes local ones available.

    ``get`` returns the block bytes or None when unavailable; callers must
    verify the result against the requested CID before trusting it.
    """

    def get(self, cid: Cid) -> Optional[bytes]: ...

    def put(self, cid: Cid, data: bytes) -> None: ...


class Broadcaster(Protocol):
    """Best-effort dissemination of small announcements to all replicas.

    Deliveries may be dropped, reordered, duplicated or corrupted; the
    sync protocol tolerates all of these.
    """

    def broadcast(self, data: bytes) -> None: ...


class FetchFailed(Exception):
    """A sub-DAG could not be retrieved within the retry budget."""

    def __init__(self, root: Cid):
        super().__init__(root.hex())
        self.root = root


@dataclass(frozen=True)
class BroadcastMsg:
    """Root announcement, optionally carrying the root node's bytes inline
    so receivers can skip one fetch round trip."""

    root: Cid
    inline_node: Optional[bytes] = None

    def encode(self) -> bytes:
        """Wire layout: version byte, 32-byte root CID, presence flag,
        then the inline node bytes if the flag is 1."""
        head = bytes([MSG_FORMAT_VERSION]) + self.root
        if self.inline_node is None:
            return head + b"\x00"
        return head + b"\x01" + self.inline_node

    @classmethod
    def decode(cls, data: bytes) -> "BroadcastMsg":
        if len(data) < 34:
            raise DecodeError("truncated broadcast message")
        if data[0] != MSG_FORMAT_VERSION:
            raise DecodeError(f"unknown message version {data[0]}")
        root = Cid(data[1:33])
        flag = data[33]
        if flag == 0:
            if len(data) != 34:
                raise DecodeError("trailing bytes after empty inline flag")
            return cls(root=root)
        if flag != 1:
            raise DecodeError(f"bad inline flag {flag}")
        if len(data) == 34:
            raise DecodeError("inline flag set but no node bytes")
        return cls(root=root, inline_node=bytes(data[34:]))


class SyncOutcome(Enum):
    APPLIED = "applied"
    ALREADY_KNOWN = "already-known"
    DEFERRED = "deferred"


@dataclass
class ReplicaConfig:
    batch_threshold: int = 1
    shortcut_interval: int = 0
    inline_broadcast: bool = False
    fetch_concurrency: int = 8
    max_fetch_retries: int = 10


def inject_shortcut_links(
    children: set[Cid], own_chain: Sequence[Cid], issue_number: int, interval: int
) -> set[Cid]:
    """Add one deep link along the replica's own issuing chain.

    On every ``interval``-th issue the new node gains an extra child:
    the replica's own event ``interval`` issues back (clamped to its first
    event).  Deep links let a cold-syncing peer walk several chain
    segments in parallel; they never change the materialized state.
    ``interval`` 0 disables the feature.
    """
    if interval <= 0 or issue_number % interval != 0:
        return children
    target_issue = max(1, issue_number - interval)
    if target_issue >= issue_number:
        return children
    return children | {own_chain[target_issue - 1]}


class FetchJob:
    """Walk-down state machine collecting the missing sub-DAG of a root.

    Drive it by requesting the CIDs from :meth:`want` and feeding each
    answer (bytes or None) to :meth:`supply`.  Blocks are verified against
    their CID on arrival; corrupt or missing answers consume one retry for
    that CID.  Branches rooted at locally stored nodes are pruned and never
    requested.  When :attr:`done`, :meth:`commit` inserts the staged nodes
    children-first and returns the fetched CID set.
    """

    def __init__(
        self,
        root: Cid,
        dag: ClockDag,
        concurrency: int = 8,
        max_retries: int = 10,
        prefetched: Optional[dict[Cid, bytes]] = None,
    ):
        self.root = root
        self.dag = dag
        self.concurrency = max(1, concurrency)
        self.max_retries = max_retries
        self.staged: dict[Cid, ClockNode] = {}
        self.staged_raw: dict[Cid, bytes] = {}
        self.inflight: set[Cid] = set()
        self.failed = False
        self.requests_made = 0
        self._queue: deque[Cid] = deque()
        self._queued: set[Cid] = set()
        self._retries: dict[Cid, int] = {}
        for cid, data in (prefetched or {}).items():
            if cid not in dag and verify_block(cid, data):
                self._stage(cid, data)
        if root not in dag and root not in self.staged:
            self._enqueue(root)

    def _enqueue(self, cid: Cid) -> None:
        if cid not in self._queued and cid not in self.inflight:
            self._queue.append(cid)
            self._queued.add(cid)

    def _stage(self, cid: Cid, data: bytes) -> bool:
        try:
            node = decode_node(data)
        except DecodeError:
            return False
        self.staged[cid] = node
        self.staged_raw[cid] = bytes(data)
        for child in node.children:
            if child not in self.dag and child not in self.staged:
                self._enqueue(child)
        return True

    def want(self) -> list[Cid]:
        """CIDs to request next, bounded by the concurrency budget.

        Never returns a CID already stored locally (stored branches are
        pruned) or one still in flight.
        """
        out = []
        while self._queue and len(self.inflight) + len(out) < self.concurrency:
            cid = self._queue.popleft()
            self._queued.discard(cid)
            if cid in self.dag or cid in self.staged:
                continue
            out.append(cid)
            self.inflight.add(cid)
            self.requests_made += 1
        return out

    def supply(self, cid: Cid, data: Optional[bytes]) -> None:
        """Feed one answer.  Unsolicited or duplicate answers are ignored.

        A missing, corrupt, or undecodable answer counts against the CID's
        retry budget; exhausting it fails the whole job.
        """
        if cid not in self.inflight:
            return
        self.inflight.discard(cid)
        if data is not None and verify_block(cid, data) and self._stage(cid, data):
            return
        self._retries[cid] = self._retries.get(cid, 0) + 1
        if self._retries[cid] > self.max_retries:
            self.failed = True
        else:
            self._enqueue(cid)

    @property
    def done(self) -> bool:
        return not self.failed and not self._queue and not self.inflight

    def commit(self) -> set[Cid]:
        """Insert all staged nodes into the DAG (children first) and return
        the fetched CID set D.  Empty when the root was already present."""
        assert self.done
        unmet: dict[Cid, int] = {}
        dependents: dict[Cid, list[Cid]] = {}
        ready: list[Cid] = []
        for cid, node in self.staged.items():
            missing = [c for c in node.children if c not in self.dag]
            unmet[cid] = len(missing)
            for child in missing:
                dependents.setdefault(child, []).append(cid)
            if not missing:
                heappush(ready, cid)
        inserted = 0
        while ready:
            cid = heappop(ready)
            self.dag.put_node(self.staged[cid], raw=self.staged_raw[cid])
            inserted += 1
            for parent in dependents.get(cid, ()):
                unmet[parent] -= 1
                if unmet[parent] == 0:
                    heappush(ready, parent)
        if inserted != len(self.staged):
            raise FetchFailed(self.root)
        return set(self.staged)


class Replica:
    """One participant: a clock DAG, its materialized state, and the sync
    logic binding them to a Broadcaster and DagSyncer.

    The instance must be driven from a single thread; the simulator
    serializes all callbacks.  ``state`` always equals ``materialize(dag)``
    after each completed call.
    """

    def __init__(
        self,
        replica_id: bytes,
        syncer: Optional[DagSyncer] = None,
        broadcaster: Optional[Broadcaster] = None,
        config: Optional[ReplicaConfig] = None,
        dag: Optional[ClockDag] = None,
    ):
        if len(replica_id) != REPLICA_ID_LEN:
            raise ValueError(f"replica id must be {REPLICA_ID_LEN} bytes")
        self.id = bytes(replica_id)
        self.dag = dag if dag is not None else ClockDag()
        self.state = KvState()
        self.pending: dict[Cid, int] = {}
        self.batch_buffer: list[Op] = []
        self.config = config if config is not None else ReplicaConfig()
        self.syncer = syncer
        self.broadcaster = broadcaster
        self.own_chain: list[Cid] = []
        self.issue_count = 0

    # -- issuing ---------------------------------------------------------

    def op_gset_add(self, element: bytes) -> Op:
        return Op(kind=OpKind.GSET_ADD, key=element, nonce=self.id)

    def op_put(self, key: bytes, value: bytes) -> Op:
        return Op(kind=OpKind.KV_PUT, key=key, value=value, nonce=self.id)

    def op_delete(self, key: bytes) -> Op:
        return Op(kind=OpKind.KV_DELETE, key=key, nonce=self.id)

    def issue(self, ops: Sequence[Op]) -> Optional[BroadcastMsg]:
        """Buffer ops; once the batch threshold is reached, emit one node.

        The node's children are the current roots (plus a shortcut link
        when due), it is applied to local state, made available through
        the DagSyncer, and its root CID is broadcast.  Returns the
        broadcast message, or None while ops are still buffering.
        """
        self.batch_buffer.extend(ops)
        if len(self.batch_buffer) < max(1, self.config.batch_threshold):
            return None
        return self._emit()

    def flush(self) -> Optional[BroadcastMsg]:
        """Emit any buffered ops even below the batch threshold."""
        if not self.batch_buffer:
            return None
        return self._emit()

    def _emit(self) -> BroadcastMsg:
        payload = encode_batch(self.batch_buffer)
        self.batch_buffer.clear()
        self.issue_count += 1
        children = inject_shortcut_links(
            set(self.dag.roots), self.own_chain, self.issue_count, self.config.shortcut_interval
        )
        extra = children - self.dag.roots
        cid = self.dag.add_event(payload, extra_children=extra)
        self.own_chain.append(cid)
        apply_node(self.state, self.dag, cid)
        raw = self.dag.store.get(cid)
        assert raw is not None
        if self.syncer is not None:
            self.syncer.put(cid, raw)
        msg = BroadcastMsg(root=cid, inline_node=raw if self.config.inline_broadcast else None)
        if self.broadcaster is not None:
            self.broadcaster.broadcast(msg.encode())
        return msg

    # -- receiving ---------------------------------------------------------

    def receive(self, raw: bytes) -> Optional[SyncOutcome]:
        """Transport entry point: decode an envelope and handle it.

        Corrupt envelopes are dropped silently (None).  Any valid
        broadcast also triggers a retry pass over parked roots.
        """
        try:
            msg = BroadcastMsg.decode(raw)
        except DecodeError:
            return None
        outcome = self.handle_broadcast(msg)
        self.retry_pending()
        return outcome

    def handle_broadcast(self, msg: BroadcastMsg) -> SyncOutcome:
        """Anti-entropy for one announced root, driven synchronously.

        Already-stored roots (including our own and duplicate deliveries)
        are ignored.  Otherwise the missing sub-DAG is fetched, applied
        oldest-first, and merged; an unfetchable root is parked for retry.
        A corrupt inline node is discarded and fetching proceeds through
        the DagSyncer.
        """
        if msg.root in self.dag:
            return SyncOutcome.ALREADY_KNOWN
        if msg.root in self.pending:
            # fresh announcement: a dormant root becomes retryable again
            del self.pending[msg.root]
        prefetched = {}
        if msg.inline_node is not None and verify_block(msg.root, msg.inline_node):
            prefetched[msg.root] = msg.inline_node
        try:
            fetched = self.fetch_missing(msg.root, prefetched=prefetched)
        except FetchFailed:
            self.defer_root(msg.root)
            return SyncOutcome.DEFERRED
        if not fetched:
            return SyncOutcome.ALREADY_KNOWN
        self.apply_and_merge(msg.root, fetched)
        return SyncOutcome.APPLIED

    def fetch_missing(
        self, root: Cid, prefetched: Optional[dict[Cid, bytes]] = None
    ) -> set[Cid]:
        """Fetch the sub-DAG under ``root`` that is not stored locally.

        Walks down from the root breadth-first through the DagSyncer,
        pruning every branch whose head is already stored, verifying all
        fetched blocks.  On success the collected nodes are inserted and
        the set of their CIDs returned (empty if the root was already
        known).  Raises :class:`FetchFailed` after the retry budget.
        """
        job = self.start_fetch(root, prefetched=prefetched)
        while not job.done and not job.failed:
            wants = job.want()
            if not wants:
                break
            if self.syncer is None:
                raise FetchFailed(root)
            for cid in wants:
                job.supply(cid, self.syncer.get(cid))
        if job.failed or not job.done:
            raise FetchFailed(root)
        return job.commit()

    def start_fetch(
        self, root: Cid, prefetched: Optional[dict[Cid, bytes]] = None
    ) -> FetchJob:
        """Create the walk state machine; event-driven hosts (the network
        simulator) pump it themselves instead of calling fetch_missing."""
        return FetchJob(
            root,
            self.dag,
            concurrency=self.config.fetch_concurrency,
            max_retries=self.config.max_fetch_retries,
            prefetched=prefetched,
        )

    def apply_and_merge(self, root: Cid, fetched: set[Cid]) -> None:
        """Steps after a successful fetch: apply the collected nodes in
        topological order, merge the root, unpark anything now stored."""
        for cid in self.dag.topo_order(fetched):
            apply_node(self.state, self.dag, cid)
        self.dag.merge(root)
        for cid in [c for c in self.pending if c in self.dag]:
            del self.pending[cid]

    def defer_root(self, root: Cid) -> None:
        if root not in self.dag:
            self.pending[root] = self.pending.get(root, 0) + 1

    def retryable_pending(self) -> list[Cid]:
        """Parked roots still within their retry budget, in a stable order."""
        return sorted(
            c for c, n in self.pending.items() if n <= self.config.max_fetch_retries
        )

    def retry_pending(self) -> None:
        """Synchronously retry parked roots (used with a blocking syncer)."""
        for root in self.retryable_pending():
            try:
                fetched = self.fetch_missing(root)
            except FetchFailed:
                self.pending[root] = self.pending.get(root, 0) + 1
                continue
            if root in self.pending:
                del self.pending[root]
            if fetched:
                self.apply_and_merge(root, fetched)
