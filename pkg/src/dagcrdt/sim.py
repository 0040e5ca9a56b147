"""Deterministic discrete-event network simulator with fault injection.

Replicas run over an in-memory scheduler that can drop, reorder (via
random extra delay), duplicate and corrupt messages, and partition the
replica set for configured windows.  Time is integer ticks; one hop costs
``1 + uniform(0..reorder_jitter)`` ticks, so reordering emerges from
jitter.  Block fetches are served by querying other reachable replicas'
stores, and requests/replies traverse the same faulty scheduler; a
dropped block exchange surfaces as a miss reply so the fetch retry logic
observes it deterministically.

Determinism: the event queue pops in (deliver_at, insertion-sequence)
order and every random choice comes from named xorshift64* streams
(see ``rng``): stream 0 drives traffic faults, consumed strictly in event
processing order, and stream 1000+i drives replica ``i``'s workload,
consumed at scheduling time.  Identical configs therefore produce
bit-identical reports.

Partition and membership checks happen at send time: a message sent
while two replicas are in different groups is counted as dropped.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

from .blocks import Cid
from .clock import ClockDag
from .payloads import Op, materialize
from .replica import BroadcastMsg, DecodeError, FetchJob, Replica, ReplicaConfig
from .rng import Rng

_TRAFFIC_STREAM = 0
_WORKLOAD_STREAM_BASE = 1000


def corrupt(data: bytes, rng: Rng) -> bytes:
    """Flip one uniformly chosen bit."""
    if not data:
        raise ValueError("cannot corrupt empty data")
    bit = rng.below(len(data) * 8)
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


@dataclass(frozen=True)
class PartitionWindow:
    """During ticks [start, end) replicas in different groups cannot
    exchange messages.  Replicas not named in any group form one implicit
    group of their own."""

    start: int
    end: int
    groups: tuple[tuple[int, ...], ...]

    def group_of(self, replica: int) -> int:
        for i, grp in enumerate(self.groups):
            if replica in grp:
                return i
        return -1


@dataclass
class SimConfig:
    replica_count: int = 3
    seed: int = 0
    drop_rate: float = 0.0
    dup_rate: float = 0.0
    corrupt_rate: float = 0.0
    reorder_jitter: int = 0
    partition_schedule: tuple[PartitionWindow, ...] = ()
    ops_per_replica: int = 10
    key_space: int = 16
    batch_threshold: int = 1
    shortcut_interval: int = 0
    final_sync_rounds: int = 3
    fetch_concurrency: int = 8
    max_fetch_retries: int = 10
    inline_broadcast: bool = False

    def validate(self) -> None:
        if self.replica_count < 1:
            raise ValueError("replica_count must be >= 1")
        for name in ("drop_rate", "dup_rate", "corrupt_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.reorder_jitter < 0:
            raise ValueError("reorder_jitter must be >= 0")
        if self.ops_per_replica < 0 or self.key_space < 1:
            raise ValueError("bad workload")
        if self.batch_threshold < 1:
            raise ValueError("batch_threshold must be >= 1")
        if self.shortcut_interval < 0 or self.final_sync_rounds < 0:
            raise ValueError("bad option")
        if self.fetch_concurrency < 1 or self.max_fetch_retries < 0:
            raise ValueError("bad fetch options")
        for win in self.partition_schedule:
            if win.start < 0 or win.end <= win.start:
                raise ValueError("partition window must have start >= 0 and end > start")
            seen: set[int] = set()
            for grp in win.groups:
                for rid in grp:
                    if rid < 0 or rid >= self.replica_count + 1:
                        raise ValueError(f"partition names unknown replica {rid}")
                    if rid in seen:
                        raise ValueError("partition groups must be disjoint")
                    seen.add(rid)

    def replica_config(self) -> ReplicaConfig:
        return ReplicaConfig(
            batch_threshold=self.batch_threshold,
            shortcut_interval=self.shortcut_interval,
            inline_broadcast=self.inline_broadcast,
            fetch_concurrency=self.fetch_concurrency,
            max_fetch_retries=self.max_fetch_retries,
        )


@dataclass
class SimEvent:
    deliver_at: int
    target: int
    provenance: str  # "issue" | "broadcast" | "block-reply" | "join"
    payload: tuple


@dataclass
class SimReport:
    converged: bool
    ticks: int
    seed: int
    replica_count: int
    replicas: list[dict]
    messages: dict[str, int]
    block_requests: dict
    cold_sync: Optional[dict] = None

    def to_json(self) -> str:
        body = {
            "converged": self.converged,
            "ticks": self.ticks,
            "seed": self.seed,
            "replica_count": self.replica_count,
            "replicas": self.replicas,
            "messages": self.messages,
            "block_requests": self.block_requests,
        }
        if self.cold_sync is not None:
            body["cold_sync"] = self.cold_sync
        return json.dumps(body, sort_keys=True, indent=2) + "\n"


@dataclass
class _Peer:
    """Per-replica simulator bookkeeping around the protocol engine."""

    replica: Replica
    jobs: dict[Cid, FetchJob] = field(default_factory=dict)
    job_started_at: dict[Cid, int] = field(default_factory=dict)
    requests: int = 0
    joined: bool = True
    first_fetch_size: Optional[int] = None
    first_fetch_ticks: Optional[int] = None


class Simulator:
    """One seeded run.  Build, call :meth:`run`, then inspect the report
    (and, in tests, the peers)."""

    def __init__(self, config: SimConfig, late_joiner_at_tick: Optional[int] = None,
                 preseed_joiner: bool = False):
        config.validate()
        self.config = config
        self.join_tick = late_joiner_at_tick
        self.preseed_joiner = preseed_joiner
        self.traffic = Rng(config.seed, _TRAFFIC_STREAM)
        self.now = 0
        self._seq = itertools.count()
        self._queue: list[tuple[int, int, SimEvent]] = []
        self.messages = {"sent": 0, "dropped": 0, "duplicated": 0, "corrupted": 0}
        n = config.replica_count + (1 if late_joiner_at_tick is not None else 0)
        self.peers = [
            _Peer(
                replica=Replica(b"r%07d" % i, config=config.replica_config()),
                joined=not (late_joiner_at_tick is not None and i == config.replica_count),
            )
            for i in range(n)
        ]
        self._provider_seq = [0] * n

    # -- scheduling ---------------------------------------------------------

    def _push(self, event: SimEvent) -> None:
        heapq.heappush(self._queue, (event.deliver_at, next(self._seq), event))

    def _reachable(self, a: int, b: int, tick: int) -> bool:
        for win in self.config.partition_schedule:
            if win.start <= tick < win.end and win.group_of(a) != win.group_of(b):
                return False
        return True

    def _hop_delay(self, faultfree: bool) -> int:
        if faultfree or self.config.reorder_jitter == 0:
            return 1
        return 1 + self.traffic.below(self.config.reorder_jitter + 1)

    def _broadcast_from(self, origin: int, raw: bytes, faultfree: bool = False) -> None:
        """Fan a broadcast envelope out to every other replica.

        Per target, in ascending index order: a drop draw (a partition at
        send time also drops), a duplication draw, then per copy a jitter
        draw and a corruption draw.
        """
        cfg = self.config
        for target in range(len(self.peers)):
            if target == origin or not self.peers[target].joined:
                continue
            self.messages["sent"] += 1
            if not self._reachable(origin, target, self.now):
                self.messages["dropped"] += 1
                continue
            if not faultfree and self.traffic.chance(cfg.drop_rate):
                self.messages["dropped"] += 1
                continue
            copies = 1
            if not faultfree and self.traffic.chance(cfg.dup_rate):
                copies = 2
                self.messages["duplicated"] += 1
            for _ in range(copies):
                data = raw
                if not faultfree and self.traffic.chance(cfg.corrupt_rate):
                    data = corrupt(raw, self.traffic)
                    self.messages["corrupted"] += 1
                self._push(
                    SimEvent(
                        deliver_at=self.now + self._hop_delay(faultfree),
                        target=target,
                        provenance="broadcast",
                        payload=(data,),
                    )
                )

    def _request_block(self, requester: int, root: Cid, cid: Cid, faultfree: bool) -> None:
        """Ask one reachable peer for a block; the reply (or a miss) comes
        back through the scheduler after the hop delay."""
        cfg = self.config
        self.peers[requester].requests += 1
        providers = [
            i
            for i in range(len(self.peers))
            if i != requester and self.peers[i].joined and self._reachable(requester, i, self.now)
        ]
        if not providers:
            self._push(
                SimEvent(self.now + 1, requester, "block-reply", (root, cid, None, False))
            )
            return
        provider = providers[self._provider_seq[requester] % len(providers)]
        self._provider_seq[requester] += 1
        dropped = not faultfree and self.traffic.chance(cfg.drop_rate)
        copies = 1
        if not faultfree and self.traffic.chance(cfg.dup_rate):
            copies = 2
            self.messages["duplicated"] += 1
        for _ in range(copies):
            corrupted = not faultfree and self.traffic.chance(cfg.corrupt_rate)
            self._push(
                SimEvent(
                    deliver_at=self.now + self._hop_delay(faultfree),
                    target=requester,
                    provenance="block-reply",
                    payload=(root, cid, None if dropped else provider, corrupted),
                )
            )

    # -- event handlers ------------------------------------------------------

    def _pump_job(self, idx: int, root: Cid, faultfree: bool) -> None:
        peer = self.peers[idx]
        job = peer.jobs.get(root)
        if job is None:
            return
        if not job.failed:
            for cid in job.want():
                self._request_block(idx, root, cid, faultfree)
        if job.failed:
            del peer.jobs[root]
            peer.job_started_at.pop(root, None)
            peer.replica.defer_root(root)
        elif job.done:
            del peer.jobs[root]
            started = peer.job_started_at.pop(root, self.now)
            fetched = job.commit()
            if fetched:
                peer.replica.apply_and_merge(root, fetched)
            if peer.first_fetch_size is None:
                peer.first_fetch_size = len(fetched)
                peer.first_fetch_ticks = self.now - started
            self._kick_pending(idx, faultfree)

    def _start_job(self, idx: int, root: Cid, prefetched: Optional[dict] = None,
                   faultfree: bool = False) -> None:
        peer = self.peers[idx]
        if root in peer.jobs or root in peer.replica.dag:
            return
        peer.jobs[root] = peer.replica.start_fetch(root, prefetched=prefetched)
        peer.job_started_at[root] = self.now
        self._pump_job(idx, root, faultfree)

    def _kick_pending(self, idx: int, faultfree: bool) -> None:
        # a failed job re-parks the root via defer_root, which counts the attempt
        peer = self.peers[idx]
        for root in peer.replica.retryable_pending():
            if root not in peer.jobs:
                self._start_job(idx, root, faultfree=faultfree)

    def _on_broadcast(self, idx: int, raw: bytes, faultfree: bool) -> None:
        peer = self.peers[idx]
        try:
            msg = BroadcastMsg.decode(raw)
        except DecodeError:
            return  # corrupt envelope: dropped silently
        replica = peer.replica
        if msg.root in replica.dag:
            if peer.first_fetch_size is None and idx == self.config.replica_count and self.join_tick is not None:
                # preseeded joiner: the announced history was already local
                peer.first_fetch_size = 0
                peer.first_fetch_ticks = 0
            self._kick_pending(idx, faultfree)
            return
        if msg.root in replica.pending:
            del replica.pending[msg.root]  # fresh announcement: retry again
        prefetched = None
        if msg.inline_node is not None:
            prefetched = {msg.root: msg.inline_node}
        self._start_job(idx, msg.root, prefetched=prefetched, faultfree=faultfree)
        self._kick_pending(idx, faultfree)

    def _on_block_reply(self, idx: int, root: Cid, cid: Cid, provider: Optional[int],
                        corrupted: bool, faultfree: bool) -> None:
        peer = self.peers[idx]
        job = peer.jobs.get(root)
        if job is None:
            return
        data: Optional[bytes] = None
        if provider is not None:
            data = self.peers[provider].replica.dag.store.get(cid)
        if data is not None and corrupted:
            data = corrupt(data, self.traffic)
            self.messages["corrupted"] += 1
        job.supply(cid, data)
        self._pump_job(idx, root, faultfree)

    def _on_issue(self, idx: int, op: Op) -> None:
        msg = self.peers[idx].replica.issue([op])
        if msg is not None:
            self._broadcast_from(idx, msg.encode())

    def _on_join(self, idx: int) -> None:
        peer = self.peers[idx]
        peer.joined = True
        if self.preseed_joiner:
            donors = [p.replica.dag for p in self.peers if p is not peer]
            seen: set[Cid] = set()
            nodes = []
            for dag in donors:
                for cid in dag.cids():
                    if cid not in seen:
                        seen.add(cid)
                        nodes.append((dag.height(cid), cid, dag.node(cid)))
            for _, _, node in sorted(nodes, key=lambda t: (t[0], t[1])):
                peer.replica.dag.put_node(node)
            peer.replica.state = materialize(peer.replica.dag)

    # -- run ------------------------------------------------------------------

    def _drain(self, faultfree: bool = False) -> None:
        while self._queue:
            _, _, event = heapq.heappop(self._queue)
            self.now = max(self.now, event.deliver_at)
            if event.provenance == "issue":
                self._on_issue(event.target, event.payload[0])
            elif event.provenance == "broadcast":
                self._on_broadcast(event.target, event.payload[0], faultfree)
            elif event.provenance == "block-reply":
                root, cid, provider, corrupted = event.payload
                self._on_block_reply(event.target, root, cid, provider, corrupted, faultfree)
            elif event.provenance == "join":
                self._on_join(event.target)

    def _schedule_workload(self) -> None:
        cfg = self.config
        for i in range(cfg.replica_count):
            rng = Rng(cfg.seed, _WORKLOAD_STREAM_BASE + i)
            tick = 0
            for k in range(cfg.ops_per_replica):
                tick += 1 + rng.below(3)
                kind = rng.below(10)
                key = b"k%03d" % rng.below(cfg.key_space)
                replica = self.peers[i].replica
                if kind < 5:
                    op = replica.op_put(key, rng.take_bytes(5))
                elif kind < 7:
                    op = replica.op_delete(key)
                else:
                    op = replica.op_gset_add(b"e%d.%d" % (i, k))
                self._push(SimEvent(tick, i, "issue", (op,)))

    def run(self) -> SimReport:
        self._schedule_workload()
        if self.join_tick is not None:
            self._push(SimEvent(self.join_tick, self.config.replica_count, "join", ()))
        self._drain(faultfree=False)

        heal = max((w.end for w in self.config.partition_schedule), default=0)
        self.now = max(self.now, heal) + 1
        for _ in range(self.config.final_sync_rounds):
            base = self.now
            for i, peer in enumerate(self.peers):
                self.now = base
                msg = peer.replica.flush()
                if msg is not None:
                    self._broadcast_from(i, msg.encode(), faultfree=True)
                for root in sorted(peer.replica.dag.roots):
                    raw = peer.replica.dag.store.get(root)
                    announce = BroadcastMsg(
                        root=root,
                        inline_node=raw if self.config.inline_broadcast else None,
                    )
                    self._broadcast_from(i, announce.encode(), faultfree=True)
            self._drain(faultfree=True)
            self.now += 1
        return self._report()

    def _report(self) -> SimReport:
        dumps = [p.replica.state.dump() for p in self.peers]
        roots = [sorted(c.hex() for c in p.replica.dag.roots) for p in self.peers]
        converged = all(d == dumps[0] for d in dumps) and all(r == roots[0] for r in roots)
        replicas = [
            {
                "id": p.replica.id.decode("ascii"),
                "nodes": len(p.replica.dag),
                "roots": roots[i],
                "state_digest": hashlib.sha256(dumps[i].encode()).hexdigest(),
            }
            for i, p in enumerate(self.peers)
        ]
        report = SimReport(
            converged=converged,
            ticks=self.now,
            seed=self.config.seed,
            replica_count=self.config.replica_count,
            replicas=replicas,
            messages=dict(self.messages),
            block_requests={
                "per_replica": [p.requests for p in self.peers],
                "total": sum(p.requests for p in self.peers),
            },
        )
        if self.join_tick is not None:
            joiner = self.peers[self.config.replica_count]
            report.cold_sync = {
                "join_tick": self.join_tick,
                "first_fetch_size": joiner.first_fetch_size,
                "first_fetch_ticks": joiner.first_fetch_ticks,
                "joiner_converged": dumps[self.config.replica_count] == dumps[0],
            }
        return report


def run(config: SimConfig) -> SimReport:
    """Execute one seeded scenario and report convergence."""
    return Simulator(config).run()


def cold_sync(config: SimConfig, late_joiner_at_tick: int, preseed: bool = False) -> SimReport:
    """Run with one extra replica that joins mid-run with an empty DAG
    (or a pre-seeded copy of every block when ``preseed``)."""
    return Simulator(config, late_joiner_at_tick=late_joiner_at_tick, preseed_joiner=preseed).run()
