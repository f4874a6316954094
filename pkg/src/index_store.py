"""
Embedding index: build, size accounting, and the single-file binary format.

File layout (little-endian):

    "TXRI" | u16 major | u16 minor
    u32 manifest length | manifest (UTF-8 JSON, sorted keys)
    u32 entry count | entry records <IIIIIIQ>
        (unit_id offset, unit_id length, doc_id offset, doc_id length,
         rows, flags, payload byte offset)
    u32 string table length | string table (UTF-8)
    u64 payload length | payload (f32 or f16 rows, unit after unit)
    u32 CRC32 of payload

Indexes are immutable once built and safe to share across threads.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.config import EMBED_BATCH_SIZE
from src.embedding import PRECISION_DTYPES, EmbeddingProvider, ProviderDescriptor, UnitEmbedding, embed_units
from src.errors import ChecksumMismatch, DimensionMismatch, FormatVersionMismatch, IndexFormatError
from src.representations import EmbeddingUnit, RepresentationKind
from src.utils import fingerprint, require

log = logging.getLogger(__name__)

MAGIC = b"TXRI"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0

_VERSION = struct.Struct("<HH")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_RECORD = struct.Struct("<IIIIIIQ")

FLAG_NORMALIZED = 1

_PAYLOAD_DTYPES = {4: "<f4", 2: "<f2"}


# ============================
# INDEX
# ============================

@dataclass(eq=False)
class Index:
    representation: RepresentationKind
    provider: ProviderDescriptor
    entries: List[UnitEmbedding]
    manifest: Dict[str, Any]

    @property
    def doc_ids(self) -> List[str]:
        return list(self.manifest["doc_ids"])

    @property
    def empty_docs(self) -> List[str]:
        return list(self.manifest["empty_docs"])

    @property
    def precision(self) -> int:
        return int(self.manifest["precision"])

    @property
    def dimension(self) -> int:
        return self.provider.dimension

    def groups(self) -> Dict[str, List[int]]:
        """doc_id -> entry positions, every manifest doc present (possibly empty)."""
        out: Dict[str, List[int]] = {doc_id: [] for doc_id in self.manifest["doc_ids"]}
        for pos, entry in enumerate(self.entries):
            out[entry.doc_id].append(pos)
        return out

    @cached_property
    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        """All rows as one float32 matrix, plus each entry's starting row (length n + 1)."""
        offsets = np.zeros(len(self.entries) + 1, dtype=np.int64)
        if self.entries:
            offsets[1:] = np.cumsum([e.rows for e in self.entries])
            matrix = np.concatenate([e.vectors.astype(np.float32) for e in self.entries], axis=0)
        else:
            matrix = np.zeros((0, self.dimension), dtype=np.float32)
        return matrix, offsets

    def __eq__(self, other) -> bool:
        if not isinstance(other, Index):
            return NotImplemented
        return (
            self.representation == other.representation
            and self.provider == other.provider
            and self.manifest == other.manifest
            and self.entries == other.entries
        )


def build_index(
    embeddings: Mapping[str, Sequence[UnitEmbedding]],
    representation: RepresentationKind,
    provider: ProviderDescriptor,
    params: Optional[Dict[str, Any]] = None,
    corpus_fingerprint: Optional[str] = None,
) -> Index:
    """
    Group unit embeddings by document (documents in sorted order, units in
    the given order). Documents without units stay in the manifest and are
    listed under `empty_docs`.
    """
    params = dict(params or {})
    precision = int(params.pop("precision", 4))
    require(precision in PRECISION_DTYPES, f"precision must be 4 or 2, got {precision}")

    doc_ids = sorted(embeddings)
    entries: List[UnitEmbedding] = []
    empty_docs: List[str] = []
    for doc_id in doc_ids:
        units = list(embeddings[doc_id])
        if not units:
            empty_docs.append(doc_id)
        for unit in units:
            require(unit.doc_id == doc_id, f"{unit.unit_id} filed under {doc_id}")
            if unit.dimension != provider.dimension:
                raise DimensionMismatch(
                    f"{unit.unit_id}: dimension {unit.dimension} != provider {provider.dimension}"
                )
            if unit.precision != precision:
                unit = UnitEmbedding(unit.unit_id, unit.doc_id, unit.vectors, precision, unit.normalized)
            entries.append(unit)

    if empty_docs:
        log.warning("%d document(s) have no units: %s", len(empty_docs), ", ".join(empty_docs[:5]))

    if corpus_fingerprint is None:
        corpus_fingerprint = fingerprint(doc_ids + [e.unit_id for e in entries])

    manifest = {
        "representation": RepresentationKind(representation).value,
        "provider": provider.to_dict(),
        "precision": precision,
        "corpus_fingerprint": corpus_fingerprint,
        "doc_ids": doc_ids,
        "empty_docs": empty_docs,
        "entry_count": len(entries),
    }
    for key in ("chunk_size", "overlap", "max_pixels"):
        manifest[key] = params.pop(key, None)
    manifest.update(params)

    return Index(RepresentationKind(representation), provider, entries, manifest)


def index_size_bytes(index: Index) -> int:
    """Bytes of stored vectors: sum of rows * dimension * precision. Metadata excluded."""
    return sum(e.rows * e.dimension * e.precision for e in index.entries)


# ============================
# SERIALIZATION
# ============================

def _encode(index: Index) -> bytes:
    dtype = _PAYLOAD_DTYPES[index.precision]
    strings = bytearray()
    records = bytearray()
    payload = bytearray()

    for entry in index.entries:
        unit = entry.unit_id.encode("utf-8")
        doc = entry.doc_id.encode("utf-8")
        unit_off = len(strings)
        strings += unit
        doc_off = len(strings)
        strings += doc
        flags = FLAG_NORMALIZED if entry.normalized else 0
        records += _RECORD.pack(unit_off, len(unit), doc_off, len(doc), entry.rows, flags, len(payload))
        payload += np.ascontiguousarray(entry.vectors, dtype=dtype).tobytes()

    manifest = json.dumps(index.manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    out = bytearray(MAGIC)
    out += _VERSION.pack(FORMAT_MAJOR, FORMAT_MINOR)
    out += _U32.pack(len(manifest)) + manifest
    out += _U32.pack(len(index.entries)) + records
    out += _U32.pack(len(strings)) + strings
    out += _U64.pack(len(payload)) + payload
    out += _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    return bytes(out)


def save_index(index: Index, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(index))
    os.replace(tmp, path)
    log.info("Saved index %s (%d entries, %d payload bytes)", path, len(index.entries), index_size_bytes(index))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumMismatch(f"index file truncated at byte {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple:
        return fmt.unpack(self.take(fmt.size))


@dataclass
class IndexHeader:
    major: int
    minor: int
    manifest: Dict[str, Any]
    entry_count: int
    payload_bytes: int


def _parse(data: bytes):
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise IndexFormatError("not an index file (bad magic)")
    major, minor = reader.unpack(_VERSION)
    if major > FORMAT_MAJOR:
        raise FormatVersionMismatch(f"index format {major}.{minor} is newer than supported {FORMAT_MAJOR}.x")

    (manifest_len,) = reader.unpack(_U32)
    try:
        manifest = json.loads(reader.take(manifest_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"unreadable manifest: {exc}") from exc

    (count,) = reader.unpack(_U32)
    records = [reader.unpack(_RECORD) for _ in range(count)]
    (strings_len,) = reader.unpack(_U32)
    strings = reader.take(strings_len)
    (payload_len,) = reader.unpack(_U64)
    payload = reader.take(payload_len)
    (crc,) = reader.unpack(_U32)

    if reader.pos != len(data):
        raise ChecksumMismatch("trailing bytes after checksum")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("payload checksum does not match")

    header = IndexHeader(major, minor, manifest, count, payload_len)
    return header, records, strings, payload


def read_header(path) -> IndexHeader:
    header, _, _, _ = _parse(Path(path).read_bytes())
    return header


def load_index(path) -> Index:
    header, records, strings, payload = _parse(Path(path).read_bytes())
    manifest = header.manifest
    provider = ProviderDescriptor.from_dict(manifest["provider"])
    precision = int(manifest["precision"])
    dtype = _PAYLOAD_DTYPES[precision]
    row_bytes = provider.dimension * precision

    entries: List[UnitEmbedding] = []
    expected_offset = 0
    for unit_off, unit_len, doc_off, doc_len, rows, flags, offset in records:
        if offset != expected_offset:
            raise IndexFormatError(f"entry payload offset {offset} != expected {expected_offset}")
        size = rows * row_bytes
        vectors = np.frombuffer(payload, dtype=dtype, count=rows * provider.dimension, offset=offset)
        entries.append(UnitEmbedding(
            unit_id=strings[unit_off:unit_off + unit_len].decode("utf-8"),
            doc_id=strings[doc_off:doc_off + doc_len].decode("utf-8"),
            vectors=vectors.reshape(rows, provider.dimension).copy(),
            precision=precision,
            normalized=bool(flags & FLAG_NORMALIZED),
        ))
        expected_offset += size

    if expected_offset != header.payload_bytes:
        raise IndexFormatError("entry table does not cover the payload")

    return Index(RepresentationKind(manifest["representation"]), provider, entries, manifest)


# ============================
# CORPUS INDEXING
# ============================

def index_corpus(
    units_by_doc: Mapping[str, Sequence[EmbeddingUnit]],
    representation: RepresentationKind,
    provider: EmbeddingProvider,
    params: Optional[Dict[str, Any]] = None,
    batch: int = EMBED_BATCH_SIZE,
    workers: int = 1,
    failures: Optional[List[Tuple[str, str]]] = None,
) -> Index:
    """Embed every document's units in one run and group them into an Index."""
    params = dict(params or {})
    precision = int(params.get("precision", 4))
    doc_ids = sorted(units_by_doc)
    flat = [unit for doc_id in doc_ids for unit in units_by_doc[doc_id]]

    embedded = embed_units(flat, provider, batch=batch, workers=workers, precision=precision, failures=failures)

    grouped: Dict[str, List[UnitEmbedding]] = {doc_id: [] for doc_id in doc_ids}
    for emb in embedded:
        grouped[emb.doc_id].append(emb)
    params.setdefault("max_pixels", provider.descriptor.max_pixels)
    return build_index(grouped, representation, provider.descriptor, params)
