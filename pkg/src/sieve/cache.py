"""Per-sample evidence snapshot cache with SVEC binary persistence.

Container layout (little-endian): magic "SVEC", u32 format version = 1,
u32 entry count; per entry: u32 key length + UTF-8 key, u32 model_version,
u32 refresh_count, u32 snapshot count; per snapshot: u32 anchor token id,
4 x u32 patch bbox (row0, col0, row1, col1 inclusive), u32 n_vectors, u32 d,
then n_vectors * d float32 values row-major. A JSON sidecar (<path>.json)
mirrors all metadata, payload excluded.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grounding import DiscoveryParams, EvidenceSnapshot, Region, discover_evidence

MAGIC = b"SVEC"
FORMAT_VERSION = 1


@dataclass
class CacheEntry:
    sample_id: str
    snapshots: list[EvidenceSnapshot]
    model_version: int
    refresh_count: int = 0


class EvidenceCache:
    """In-memory snapshot store; reads are lock-free against a dict that is
    swapped atomically per entry, writes serialize on one lock."""

    def __init__(self, patch_size: int = 1, vocab: dict[str, int] | None = None):
        self.patch_size = patch_size
        self.vocab = vocab or {}
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def sample_ids(self) -> list[str]:
        return sorted(self._entries)

    def upsert(
        self, sample_id: str, snapshots: list[EvidenceSnapshot], model_version: int
    ) -> None:
        with self._lock:
            previous = self._entries.get(sample_id)
            refresh_count = previous.refresh_count if previous else 0
            self._entries[sample_id] = CacheEntry(
                sample_id=sample_id,
                snapshots=list(snapshots),
                model_version=model_version,
                refresh_count=refresh_count,
            )

    def lookup(self, sample_id: str) -> CacheEntry | None:
        return self._entries.get(sample_id)

    def refresh(self, sample, model, params: DiscoveryParams | None = None) -> None:
        """Re-run discovery under the current weights; bumps refresh_count.
        The entry is left unchanged if discovery raises."""
        entry = self._entries.get(sample.sample_id)
        if entry is None:
            raise KeyError(f"no cache entry for {sample.sample_id!r}")
        snapshots = discover_evidence(model, sample.image, sample.question, params)
        with self._lock:
            self._entries[sample.sample_id] = CacheEntry(
                sample_id=sample.sample_id,
                snapshots=snapshots,
                model_version=model.version,
                refresh_count=entry.refresh_count + 1,
            )


def _pack_u32(*values: int) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)


def save(cache: EvidenceCache, path) -> None:
    """Write the SVEC container and its JSON sidecar atomically."""
    path = Path(path)
    chunks = [MAGIC, _pack_u32(FORMAT_VERSION, len(cache._entries))]
    sidecar_entries = []
    for key in cache.sample_ids():
        entry = cache._entries[key]
        key_bytes = key.encode("utf-8")
        chunks.append(_pack_u32(len(key_bytes)))
        chunks.append(key_bytes)
        chunks.append(
            _pack_u32(entry.model_version, entry.refresh_count, len(entry.snapshots))
        )
        snap_meta = []
        for snap in entry.snapshots:
            bbox = snap.region.bbox_patches
            payload = np.ascontiguousarray(snap.embeddings, dtype="<f4")
            n_vec, d = payload.shape
            chunks.append(_pack_u32(snap.anchor[0], *bbox, n_vec, d))
            chunks.append(payload.tobytes())
            snap_meta.append(
                {
                    "anchor_id": snap.anchor[0],
                    "anchor_token": snap.anchor[1],
                    "bbox_patches": list(bbox),
                    "bbox_pixels": list(snap.region.bbox_pixels),
                    "source_space": snap.source_space,
                    "n_vectors": n_vec,
                    "d": d,
                }
            )
        sidecar_entries.append(
            {
                "sample_id": key,
                "model_version": entry.model_version,
                "refresh_count": entry.refresh_count,
                "snapshots": snap_meta,
            }
        )

    tmp = path.with_name("." + path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)

    sidecar = path.with_name(path.name + ".json")
    tmp = sidecar.with_name("." + sidecar.name + ".tmp")
    tmp.write_text(
        json.dumps(
            {"format_version": FORMAT_VERSION, "entries": sidecar_entries}, indent=2
        )
    )
    tmp.replace(sidecar)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load(
    path, vocab: dict[str, int] | None = None, patch_size: int = 1
) -> EvidenceCache:
    """Parse an SVEC container; malformed input raises FormatError with the
    offending byte offset and no partial cache is returned."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    rev = {i: t for t, i in (vocab or {}).items()}

    cache = EvidenceCache(patch_size=patch_size, vocab=vocab)
    n_entries = r.u32("entry count")
    for _ in range(n_entries):
        key_len = r.u32("key length")
        key = r.take(key_len, "key").decode("utf-8")
        model_version = r.u32("model_version")
        refresh_count = r.u32("refresh_count")
        n_snaps = r.u32("snapshot count")
        snapshots = []
        for _ in range(n_snaps):
            anchor_id = r.u32("anchor id")
            bbox = tuple(r.u32("bbox") for _ in range(4))
            n_vec = r.u32("n_vectors")
            d = r.u32("d")
            payload = np.frombuffer(
                r.take(n_vec * d * 4, "payload"), dtype="<f4"
            ).reshape(n_vec, d)
            r0, c0, r1, c1 = bbox
            region = Region(
                blocks=set(),
                bbox_patches=bbox,
                bbox_pixels=(
                    r0 * patch_size,
                    c0 * patch_size,
                    (r1 + 1) * patch_size,
                    (c1 + 1) * patch_size,
                ),
            )
            snapshots.append(
                EvidenceSnapshot(
                    anchor=(anchor_id, rev.get(anchor_id, "")),
                    region=region,
                    embeddings=payload.copy(),
                    source_space="input-embedding",
                    model_version=model_version,
                )
            )
        entry = CacheEntry(
            sample_id=key,
            snapshots=snapshots,
            model_version=model_version,
            refresh_count=refresh_count,
        )
        cache._entries[key] = entry
    if r.offset != len(data):
        raise FormatError("trailing bytes after last entry", r.offset)
    return cache


def refresh_triggered(trajectories, breakdowns) -> bool:
    """Failure predicate: some trajectory in the group used evidence
    (insertion_count >= 1) yet scored r_res = 0."""
    return any(
        t.insertion_count >= 1 and b.r_res == 0
        for t, b in zip(trajectories, breakdowns)
    )
