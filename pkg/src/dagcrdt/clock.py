"""A logical clock realized as a content-addressed DAG.

Every event is a node whose children are the roots that existed when the
event was issued, so descendancy encodes happened-before: ``a`` happened
before ``b`` exactly when ``a`` lies in the sub-DAG under ``b``.  Merging
two clocks is a union of their node sets; the root set afterwards is the
set of nodes with no stored parent.

In addition to the strict partial order, the clock offers a deterministic
total order: nodes compare by (height, cid), where height is the length
of the longest child path under the node.  A descendant always has a
strictly smaller height than its ancestors, so the total order extends
happened-before, and concurrent nodes at equal height fall back to
ascending CID bytes.  Unlike a naive "CID breaks all ties" rule, which is
not transitive, (height, cid) is a genuine total order, which keeps
last-writer-wins resolution independent of delivery order.
"""

from __future__ import annotations

from enum import Enum
from typing import Iterable, Iterator, Optional

from .blocks import (
    BlockStore,
    Cid,
    ClockNode,
    MemoryBlockStore,
    decode_node,
    encode_node,
)


class UnknownCid(KeyError):
    """Raised when an operation references a CID not present in the DAG."""

    def __init__(self, cid: Cid):
        super().__init__(cid.hex() if isinstance(cid, bytes) else cid)
        self.cid = cid


class CausalRelation(Enum):
    BEFORE = "before"
    AFTER = "after"
    EQUAL = "equal"
    CONCURRENT = "concurrent"


class ClockDag:
    """A replica's local clock: a block store plus the current root set.

    Invariants maintained by construction:

    * every child referenced by a stored node is itself stored (staging of
      in-flight fetches happens outside this type);
    * ``roots`` is exactly the set of stored CIDs with no stored parent;
    * links are acyclic (guaranteed by content addressing).

    Roots and per-node heights are tracked incrementally on insertion, so
    inclusion checks are O(1) dictionary lookups rather than DAG walks.
    """

    def __init__(self, store: Optional[BlockStore] = None):
        self.store: BlockStore = store if store is not None else MemoryBlockStore()
        self.roots: set[Cid] = set()
        self._nodes: dict[Cid, ClockNode] = {}
        self._heights: dict[Cid, int] = {}
        if store is not None and store.list():
            self._index_existing()

    def _index_existing(self) -> None:
        """Rebuild roots/heights from a pre-populated store (e.g. a block
        directory on disk).  Children-first insertion order is recovered by
        repeatedly indexing nodes whose children are all indexed."""
        pending: dict[Cid, ClockNode] = {}
        for cid in self.store.list():
            data = self.store.get(cid)
            if data is None:
                continue
            pending[cid] = decode_node(data)
        referenced: set[Cid] = set()
        unmet = {cid: 0 for cid in pending}
        dependents: dict[Cid, list[Cid]] = {}
        for cid, node in pending.items():
            for child in node.children:
                referenced.add(child)
                if child not in pending:
                    raise UnknownCid(child)
                unmet[cid] += 1
                dependents.setdefault(child, []).append(cid)
        ready = sorted(c for c, n in unmet.items() if n == 0)
        done = 0
        while ready:
            cid = ready.pop()
            node = pending[cid]
            self._nodes[cid] = node
            self._heights[cid] = (
                1 + max(self._heights[c] for c in node.children) if node.children else 0
            )
            done += 1
            for parent in dependents.get(cid, ()):
                unmet[parent] -= 1
                if unmet[parent] == 0:
                    ready.append(parent)
        if done != len(pending):
            raise ValueError("block store contains a cycle or unresolved links")
        self.roots = set(pending) - referenced

    # -- storage ---------------------------------------------------------

    def __contains__(self, cid: Cid) -> bool:
        return cid in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def cids(self) -> set[Cid]:
        return set(self._nodes)

    def node(self, cid: Cid) -> ClockNode:
        try:
            return self._nodes[cid]
        except KeyError:
            raise UnknownCid(cid) from None

    def height(self, cid: Cid) -> int:
        try:
            return self._heights[cid]
        except KeyError:
            raise UnknownCid(cid) from None

    def put_node(self, node: ClockNode, raw: Optional[bytes] = None) -> Cid:
        """Insert a node whose children are all present; idempotent.

        Updates the root set: the node's children lose root status, the
        node itself becomes a root (nothing stored can reference a node
        that was not stored first, so a new node never has a parent).
        """
        cid = node.cid
        if cid in self._nodes:
            return cid
        for child in node.children:
            if child not in self._nodes:
                raise UnknownCid(child)
        self.store.put(cid, raw if raw is not None else encode_node(node))
        self._nodes[cid] = node
        self._heights[cid] = (
            1 + max(self._heights[c] for c in node.children) if node.children else 0
        )
        self.roots.difference_update(node.children)
        self.roots.add(cid)
        return cid

    # -- events and merging ----------------------------------------------

    def add_event(self, payload: bytes, extra_children: Iterable[Cid] = ()) -> Cid:
        """Record a new event as a new root.

        The node's children are the previous roots, so the event is causally
        after everything currently known.  ``extra_children`` lets callers
        add deep links on top of the required ones.
        """
        children = set(self.roots)
        children.update(extra_children)
        node = ClockNode(payload=bytes(payload), children=tuple(children))
        return self.put_node(node)

    def clock_includes(self, other_root: Cid) -> bool:
        """True iff the clock rooted at ``other_root`` is contained in this
        one.  A stored node implies its entire sub-DAG is stored, so this is
        a constant-time membership check."""
        return other_root in self._nodes

    def merge(self, fetched_root: Cid) -> None:
        """Absorb a fetched clock into this one.

        The caller must already have inserted the full sub-DAG under
        ``fetched_root`` (replica sync does this after fetching).  Root
        bookkeeping is incremental on insertion, so the merge rules —
        keep for an already-included root, replace covered local roots,
        otherwise keep both — have already taken effect; this validates
        the precondition and the resulting root set.
        """
        if fetched_root not in self._nodes:
            raise UnknownCid(fetched_root)

    # -- ordering ----------------------------------------------------------

    def happened_before(self, a: Cid, b: Cid) -> bool:
        """True iff a path of child links leads from ``b`` down to ``a``.

        Strict: False when ``a == b``.  The walk prunes branches whose
        height is too small to contain ``a``.
        """
        ha = self.height(a)
        hb = self.height(b)
        if ha >= hb:
            return False
        seen: set[Cid] = set()
        stack = [b]
        while stack:
            node = self._nodes[stack.pop()]
            for child in node.children:
                if child == a:
                    return True
                if child in seen:
                    continue
                seen.add(child)
                if self._heights[child] > ha:
                    stack.append(child)
        return False

    def compare(self, a: Cid, b: Cid) -> CausalRelation:
        if a not in self._nodes:
            raise UnknownCid(a)
        if b not in self._nodes:
            raise UnknownCid(b)
        if a == b:
            return CausalRelation.EQUAL
        ha, hb = self._heights[a], self._heights[b]
        if ha < hb and self.happened_before(a, b):
            return CausalRelation.BEFORE
        if hb < ha and self.happened_before(b, a):
            return CausalRelation.AFTER
        return CausalRelation.CONCURRENT

    def sort_key(self, cid: Cid) -> tuple[int, Cid]:
        """Total-order key: (height, cid bytes); see the module docstring."""
        return (self.height(cid), cid)

    def total_compare(self, a: Cid, b: Cid) -> int:
        """Strict total order extending happened-before: -1, 0 or 1.

        Causally ordered pairs agree with :meth:`compare`; concurrent nodes
        order by height, then ascending CID bytes.
        """
        ka, kb = self.sort_key(a), self.sort_key(b)
        return -1 if ka < kb else (1 if ka > kb else 0)

    def topo_order(self, cids: Iterable[Cid]) -> list[Cid]:
        """Sort CIDs oldest-first, consistent with happened-before.

        Whenever ``happened_before(x, y)``, ``x`` appears before ``y``;
        concurrent ties break by the total order, so the output depends
        only on DAG content.
        """
        return sorted(cids, key=self.sort_key)

    # -- export ------------------------------------------------------------

    def walk(self, root: Cid) -> Iterator[Cid]:
        """Yield ``root`` and every node beneath it, each exactly once."""
        if root not in self._nodes:
            raise UnknownCid(root)
        seen = {root}
        stack = [root]
        while stack:
            cid = stack.pop()
            yield cid
            for child in self._nodes[cid].children:
                if child not in seen:
                    seen.add(child)
                    stack.append(child)

    def dump_dot(self) -> str:
        """Render the DAG as Graphviz DOT text.

        Node labels are the first 8 hex chars of the CID; edges point from
        parent to child; roots are drawn with a double border.  Output is
        deterministic: nodes and edges are emitted in ascending CID order.
        """
        lines = ["digraph dag {"]
        for cid in sorted(self._nodes):
            style = ' peripheries=2' if cid in self.roots else ""
            lines.append(f'  "{cid.hex()}" [label="{cid.hex()[:8]}"{style}];')
        for cid in sorted(self._nodes):
            for child in self._nodes[cid].children:
                lines.append(f'  "{cid.hex()}" -> "{child.hex()}";')
        lines.append("}")
        return "\n".join(lines) + "\n"
