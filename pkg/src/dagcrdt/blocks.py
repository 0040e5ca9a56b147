"""Content addressing: canonical node encoding, CIDs, and block storage.

A DAG node is serialized to a unique canonical byte string, and its CID is
the SHA-256 digest of that string.  Because the encoding is canonical,
equal nodes always hash to equal CIDs, and any two blocks with the same
CID carry identical content.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

CID_LEN = 32
NODE_FORMAT_VERSION = 1

# u32 big-endian child count and payload length
_LEN_BYTES = 4
_MAX_LEN = 2**32 - 1


class DecodeError(ValueError):
    """Raised when bytes violate the canonical encoding rules."""


class Cid(bytes):
    """A 32-byte SHA-256 content identifier.

    Cids compare and sort as raw bytes (lexicographic order) and render
    as lowercase hex.
    """

    def __new__(cls, raw: bytes) -> "Cid":
        if len(raw) != CID_LEN:
            raise ValueError(f"cid must be exactly {CID_LEN} bytes, got {len(raw)}")
        return super().__new__(cls, raw)

    @classmethod
    def from_hex(cls, text: str) -> "Cid":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Cid({self.hex()})"


@dataclass(frozen=True)
class ClockNode:
    """An immutable DAG node: an opaque payload plus the CIDs of its children.

    Children form a set; they are kept internally as a sorted tuple so that
    iteration order is deterministic.  A node may not list the same child
    twice.
    """

    payload: bytes
    children: tuple[Cid, ...] = ()

    def __post_init__(self) -> None:
        kids = tuple(sorted(Cid(c) for c in self.children))
        for a, b in zip(kids, kids[1:]):
            if a == b:
                raise ValueError(f"duplicate child cid {a.hex()}")
        object.__setattr__(self, "children", kids)

    @cached_property
    def cid(self) -> Cid:
        return compute_cid(encode_node(self))


def encode_node(node: ClockNode) -> bytes:
    """Serialize a node to its unique canonical form.

    Layout: format-version byte, u32 child count, each child CID in
    ascending byte order, u32 payload length, payload bytes.
    """
    if len(node.children) > _MAX_LEN or len(node.payload) > _MAX_LEN:
        raise ValueError("node too large to encode")
    parts = [bytes([NODE_FORMAT_VERSION]), len(node.children).to_bytes(_LEN_BYTES, "big")]
    parts.extend(node.children)  # already sorted and deduplicated
    parts.append(len(node.payload).to_bytes(_LEN_BYTES, "big"))
    parts.append(node.payload)
    return b"".join(parts)


def decode_node(data: bytes) -> ClockNode:
    """Parse canonical node bytes; inverse of :func:`encode_node`.

    Rejects anything that is not the unique canonical form: truncated or
    oversized input, unknown version, and unsorted or duplicate children.
    """
    if len(data) < 1 + _LEN_BYTES:
        raise DecodeError("truncated: missing header")
    if data[0] != NODE_FORMAT_VERSION:
        raise DecodeError(f"unknown format version {data[0]}")
    pos = 1
    count = int.from_bytes(data[pos : pos + _LEN_BYTES], "big")
    pos += _LEN_BYTES
    children = []
    prev: Optional[bytes] = None
    for _ in range(count):
        raw = data[pos : pos + CID_LEN]
        if len(raw) < CID_LEN:
            raise DecodeError("truncated: incomplete child cid")
        if prev is not None:
            if raw == prev:
                raise DecodeError("duplicate child cid")
            if raw < prev:
                raise DecodeError("children not in ascending order")
        children.append(Cid(raw))
        prev = raw
        pos += CID_LEN
    if len(data) < pos + _LEN_BYTES:
        raise DecodeError("truncated: missing payload length")
    plen = int.from_bytes(data[pos : pos + _LEN_BYTES], "big")
    pos += _LEN_BYTES
    payload = data[pos : pos + plen]
    if len(payload) < plen:
        raise DecodeError("truncated: incomplete payload")
    pos += plen
    if pos != len(data):
        raise DecodeError("trailing bytes after payload")
    return ClockNode(payload=bytes(payload), children=tuple(children))


def compute_cid(data: bytes) -> Cid:
    """SHA-256 of encoded node bytes."""
    return Cid(hashlib.sha256(data).digest())


def verify_block(cid: bytes, data: bytes) -> bool:
    """True iff ``data`` hashes to ``cid``.

    A False result means the block is corrupt (or mis-addressed) and must
    be discarded by the caller.
    """
    return hashlib.sha256(data).digest() == bytes(cid)


class BlockStore(ABC):
    """Keyed storage of encoded blocks by CID.

    Implementations must be safe for concurrent readers with a single
    writer; the simulator only ever uses a store single-threaded.
    """

    @abstractmethod
    def get(self, cid: Cid) -> Optional[bytes]:
        """Return the block bytes, or None if absent."""

    @abstractmethod
    def put(self, cid: Cid, data: bytes) -> None:
        """Store block bytes under ``cid``."""

    @abstractmethod
    def has(self, cid: Cid) -> bool:
        """True iff ``get`` would succeed."""

    @abstractmethod
    def list(self) -> set[Cid]:
        """The set of all stored CIDs."""

    def __contains__(self, cid: Cid) -> bool:
        return self.has(cid)


@dataclass
class MemoryBlockStore(BlockStore):
    """Dict-backed store."""

    _blocks: dict[Cid, bytes] = field(default_factory=dict)

    def get(self, cid: Cid) -> Optional[bytes]:
        return self._blocks.get(cid)

    def put(self, cid: Cid, data: bytes) -> None:
        self._blocks[Cid(cid)] = bytes(data)

    def has(self, cid: Cid) -> bool:
        return cid in self._blocks

    def list(self) -> set[Cid]:
        return set(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)


class DirectoryBlockStore(BlockStore):
    """One file per block, named by the 64-char lowercase hex of the CID.

    File contents are exactly the encoded block bytes, no envelope.
    Writes go to a temp file in the same directory and are renamed into
    place, so a reader never observes a half-written block.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def _file(self, cid: Cid) -> Path:
        return self.path / cid.hex()

    def get(self, cid: Cid) -> Optional[bytes]:
        try:
            return self._file(cid).read_bytes()
        except FileNotFoundError:
            return None

    def put(self, cid: Cid, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.path, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self._file(cid))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def has(self, cid: Cid) -> bool:
        return self._file(cid).exists()

    def list(self) -> set[Cid]:
        out = set()
        for entry in self.path.iterdir():
            name = entry.name
            if len(name) == 2 * CID_LEN and not name.startswith("."):
                try:
                    out.add(Cid.from_hex(name))
                except ValueError:
                    continue
        return out


def iter_blocks(store: BlockStore) -> Iterable[tuple[Cid, bytes]]:
    """Yield (cid, bytes) for every stored block, in ascending CID order."""
    for cid in sorted(store.list()):
        data = store.get(cid)
        if data is not None:
            yield cid, data
