"""Immutable store of phrase vectors with exact top-k inner-product search
and a checksummed binary file format.

Vectors are held as float32; search scores accumulate in float64. Entries
are grouped per context and ordered by (ctx_id, start, end), which doubles
as the deterministic tie-break order for equal scores.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .dual_encoder import PhraseVector, QuestionVector
from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateEntry,
    FormatError,
    UnknownContext,
)

INDEX_MAGIC = b"PQIX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class IndexEntry:
    ctx_id: str
    start: int
    end: int
    text: str


@dataclass
class SearchHit:
    entry: IndexEntry
    score: float
    rank: int

    @property
    def text(self) -> str:
        return self.entry.text


@dataclass
class PhraseIndex:
    dim: int
    vectors: np.ndarray  # float32, [n, dim]
    entries: list[IndexEntry]
    context_table: dict[str, tuple[int, int]]  # ctx_id -> (offset, length)

    def __len__(self) -> int:
        return len(self.entries)


def build_index(vectors: list[PhraseVector]) -> PhraseIndex:
    """Group by context, order by (ctx_id, start, end), store as float32."""
    if not vectors:
        return PhraseIndex(0, np.zeros((0, 0), dtype=np.float32), [], {})
    dim = len(vectors[0].values)
    for v in vectors:
        if len(v.values) != dim:
            raise DimensionMismatch(
                f"vector for ({v.ctx_id}, {v.start}, {v.end}) has dim "
                f"{len(v.values)}, expected {dim}"
            )
    ordered = sorted(vectors, key=lambda v: (v.ctx_id, v.start, v.end))
    entries = []
    seen = set()
    for v in ordered:
        key = (v.ctx_id, v.start, v.end)
        if key in seen:
            raise DuplicateEntry(f"duplicate index entry {key}")
        seen.add(key)
        entries.append(IndexEntry(v.ctx_id, v.start, v.end, v.text))
    block = np.array([v.values for v in ordered], dtype=np.float32)
    table: dict[str, tuple[int, int]] = {}
    i = 0
    while i < len(entries):
        j = i
        while j < len(entries) and entries[j].ctx_id == entries[i].ctx_id:
            j += 1
        table[entries[i].ctx_id] = (i, j - i)
        i = j
    return PhraseIndex(dim, block, entries, table)


def search(
    index: PhraseIndex,
    q: QuestionVector,
    top_k: int,
    ctx_filter: str | None = None,
) -> list[SearchHit]:
    """Exact scan; ties broken by (ctx_id, start, end) ascending."""
    if ctx_filter is not None and ctx_filter not in index.context_table:
        raise UnknownContext(f"context {ctx_filter!r} not in index")
    if len(index) == 0:
        return []
    qv = np.asarray(q.values, dtype=np.float64)
    if qv.shape != (index.dim,):
        raise DimensionMismatch(f"query dim {qv.shape} vs index dim {index.dim}")
    if ctx_filter is None:
        lo, n = 0, len(index)
    else:
        lo, n = index.context_table[ctx_filter]
    scores = index.vectors[lo : lo + n].astype(np.float64) @ qv
    order = np.argsort(-scores, kind="stable")[: max(top_k, 0)]
    return [
        SearchHit(index.entries[lo + int(i)], float(scores[i]), rank)
        for rank, i in enumerate(order)
    ]


def save_index(index: PhraseIndex, path) -> None:
    """Binary layout: magic, version, dim, entry count, context table,
    vector block, metadata block, trailing CRC32 of everything before it."""
    parts = [INDEX_MAGIC, struct.pack("<II", INDEX_VERSION, index.dim)]
    parts.append(struct.pack("<Q", len(index.entries)))
    parts.append(struct.pack("<Q", len(index.context_table)))
    for ctx_id in sorted(index.context_table):
        offset, length = index.context_table[ctx_id]
        raw = ctx_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<QQ", offset, length))
    parts.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    for e in index.entries:
        raw = e.text.encode("utf-8")
        parts.append(struct.pack("<III", e.start, e.end, len(raw)))
        parts.append(raw)
    blob = b"".join(parts)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_index(path) -> PhraseIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 4 + 4 + 8 + 4 or blob[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: not a phrase index (bad magic or too short)")
    r = _Reader(blob[:-4], path)
    r.take(4)  # magic
    version, dim = r.unpack("<II")
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    (n_entries,) = r.unpack("<Q")
    (n_contexts,) = r.unpack("<Q")
    table: dict[str, tuple[int, int]] = {}
    for _ in range(n_contexts):
        (id_len,) = r.unpack("<H")
        ctx_id = r.take(id_len).decode("utf-8")
        offset, length = r.unpack("<QQ")
        table[ctx_id] = (offset, length)
    vec_bytes = r.take(n_entries * dim * 4)
    vectors = np.frombuffer(vec_bytes, dtype="<f4").reshape(n_entries, dim).copy()
    spans = []
    for _ in range(n_entries):
        start, end, text_len = r.unpack("<III")
        text = r.take(text_len).decode("utf-8")
        spans.append((start, end, text))
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatch(
            f"{path}: CRC32 {actual_crc:#010x} != stored {stored_crc:#010x}"
        )
    entries = [None] * n_entries
    for ctx_id, (offset, length) in table.items():
        if offset + length > n_entries:
            raise FormatError(f"{path}: context table range out of bounds")
        for i in range(offset, offset + length):
            start, end, text = spans[i]
            entries[i] = IndexEntry(ctx_id, start, end, text)
    if any(e is None for e in entries):
        raise FormatError(f"{path}: context table does not cover all entries")
    if n_entries == 0:
        vectors = np.zeros((0, dim if dim else 0), dtype=np.float32)
    return PhraseIndex(dim, vectors, entries, table)
