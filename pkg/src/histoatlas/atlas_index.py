"""Immutable labeled atlas with exact Euclidean k-NN search.

ATL1 file layout: one JSON header line carrying the build options, the label
table and a content checksum, followed by the verbatim EMB1 payload.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation import LabelTable
from .embedding_io import EmbeddingFormatError, EmbeddingSet, decode_emb1, encode_emb1

__all__ = [
    "Atlas",
    "AtlasError",
    "BuildOptions",
    "SearchHit",
    "build_atlas",
    "knn",
    "knn_batch",
    "load_atlas",
    "save_atlas",
]

MAGIC = "ATL1"
HASH_ALGORITHM = "blake2b-64"
_CHUNK_ROWS = 8192


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class BuildOptions:
    normalize: bool = False


@dataclass(frozen=True, order=True)
class SearchHit:
    rank: int
    patch_id: str
    label_id: int
    distance: float

    def to_json(self) -> dict:
        return {"rank": self.rank, "patch_id": self.patch_id, "label_id": self.label_id, "distance": self.distance}


def _checksum(options: BuildOptions, labels: LabelTable, emb_bytes: bytes) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps({"options": {"normalize": options.normalize}, "labels": labels.to_dict()},
                        sort_keys=True, separators=(",", ":")).encode())
    h.update(b"\n")
    h.update(emb_bytes)
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Atlas:
    embedding_set: EmbeddingSet
    label_table: LabelTable
    build_options: BuildOptions = field(default_factory=BuildOptions)
    checksum: str = ""
    _id_rank: np.ndarray = field(default=None, init=False, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        ids = np.array(self.embedding_set.patch_ids, dtype=object)
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(ids, kind="stable")] = np.arange(len(ids))
        rank.setflags(write=False)
        object.__setattr__(self, "_id_rank", rank)

    @property
    def dim(self) -> int:
        return self.embedding_set.dim

    @property
    def count(self) -> int:
        return self.embedding_set.count

    @property
    def vectors(self) -> np.ndarray:
        return self.embedding_set.vectors

    @property
    def normalize(self) -> bool:
        return self.build_options.normalize

    def to_bytes(self) -> bytes:
        emb_bytes = encode_emb1(self.embedding_set)
        header = {
            "magic": MAGIC,
            "options": {"normalize": self.build_options.normalize},
            "labels": self.label_table.to_dict(),
            "checksum": {"algorithm": HASH_ALGORITHM, "hex": self.checksum},
        }
        return json.dumps(header, separators=(",", ":")).encode() + b"\n" + emb_bytes


def _unit_rows(vectors: np.ndarray, what: str) -> np.ndarray:
    v64 = vectors.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", v64, v64))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise AtlasError(f"zero vector {what} {int(zero[0])}")
    return (v64 / norms[:, None]).astype(np.float32)


def build_atlas(emb: EmbeddingSet, labels: LabelTable, opts: BuildOptions | None = None) -> Atlas:
    opts = opts or BuildOptions()
    if emb.count < 1:
        raise AtlasError("cannot build an atlas from an empty embedding set")
    for i, rec in enumerate(emb.records):
        if rec.label_id not in labels:
            raise AtlasError(f"record {i} ({rec.patch_id!r}) has label_id {rec.label_id} missing from label table")
    ids = emb.patch_ids
    if len(set(ids)) != len(ids):
        raise AtlasError("atlas patch ids must be unique")
    if opts.normalize:
        emb = emb.with_vectors(_unit_rows(emb.vectors, "row"))
    checksum = _checksum(opts, labels, encode_emb1(emb))
    return Atlas(emb, labels, opts, checksum)


def save_atlas(atlas: Atlas, path: str | Path) -> None:
    Path(path).write_bytes(atlas.to_bytes())


def load_atlas(path: str | Path) -> Atlas:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    try:
        header = json.loads(data[:nl]) if nl >= 0 else None
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise EmbeddingFormatError(f"{path}: magic mismatch (expected {MAGIC!r})")
    algo = header.get("checksum", {}).get("algorithm")
    if algo != HASH_ALGORITHM:
        raise AtlasError(f"{path}: unsupported checksum algorithm {algo!r}")
    opts = BuildOptions(normalize=bool(header["options"]["normalize"]))
    labels = LabelTable.from_dict(header["labels"])
    emb_bytes = data[nl + 1 :]
    digest = _checksum(opts, labels, emb_bytes)
    if digest != header["checksum"]["hex"]:
        raise AtlasError(f"{path}: checksum mismatch (file {header['checksum']['hex']}, computed {digest})")
    emb = decode_emb1(emb_bytes, str(path))
    for i, rec in enumerate(emb.records):
        if rec.label_id not in labels:
            raise AtlasError(f"{path}: record {i} label_id {rec.label_id} missing from label table")
    return Atlas(emb, labels, opts, digest)


def _check_k(atlas: Atlas, k: int) -> None:
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise AtlasError(f"k must be an integer, got {k!r}")
    if not 1 <= k <= atlas.count:
        raise AtlasError(f"k out of range: {k} (atlas holds {atlas.count} vectors)")


def _prepare_query(atlas: Atlas, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != atlas.dim:
        raise AtlasError(f"dim mismatch: got {q.shape[0]}, atlas {atlas.dim}")
    if not np.all(np.isfinite(q)):
        raise AtlasError("query contains non-finite values")
    q = q.astype(np.float32).astype(np.float64)
    if atlas.normalize:
        norm = np.sqrt(q @ q)
        if norm == 0:
            raise AtlasError("zero query vector under a normalized atlas")
        q = (q / norm).astype(np.float32).astype(np.float64)
    return q


def _squared_distances(atlas: Atlas, q: np.ndarray) -> np.ndarray:
    vecs = atlas.vectors
    out = np.empty(vecs.shape[0], dtype=np.float64)
    for s in range(0, vecs.shape[0], _CHUNK_ROWS):
        diff = vecs[s : s + _CHUNK_ROWS].astype(np.float64) - q
        out[s : s + _CHUNK_ROWS] = np.einsum("ij,ij->i", diff, diff)
    return out


def _knn_checked(atlas: Atlas, q: np.ndarray, k: int) -> list[SearchHit]:
    d2 = _squared_distances(atlas, q)
    if k < d2.shape[0]:
        kth = np.partition(d2, k - 1)[k - 1]
        cand = np.flatnonzero(d2 <= kth)
    else:
        cand = np.arange(d2.shape[0])
    order = cand[np.lexsort((atlas._id_rank[cand], d2[cand]))][:k]
    recs = atlas.embedding_set.records
    return [
        SearchHit(rank=r + 1, patch_id=recs[i].patch_id, label_id=recs[i].label_id, distance=float(np.sqrt(d2[i])))
        for r, i in enumerate(order)
    ]


def knn(atlas: Atlas, query, k: int) -> list[SearchHit]:
    """The k nearest atlas rows by Euclidean distance, ties ordered by patch_id."""
    _check_k(atlas, k)
    return _knn_checked(atlas, _prepare_query(atlas, query), k)


def knn_batch(atlas: Atlas, queries: EmbeddingSet | np.ndarray | Sequence, k: int) -> list[list[SearchHit]]:
    _check_k(atlas, k)
    vectors = queries.vectors if isinstance(queries, EmbeddingSet) else np.asarray(queries, dtype=np.float64)
    if vectors.size == 0:
        return []
    if vectors.ndim != 2:
        raise AtlasError("queries must be a 2-D array")
    return [_knn_checked(atlas, _prepare_query(atlas, row), k) for row in vectors]
