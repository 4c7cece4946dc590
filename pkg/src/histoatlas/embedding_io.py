"""Embedding containers: the EMB1 file format, CSV import and the extractor client.

EMB1 layout::

    {"magic":"EMB1","dim":D,"count":N,"dtype":"f32le"}\\n
    N*D little-endian float32 values
    N lines of JSON, one PatchRecord each
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .patching import PatchRecord

log = logging.getLogger(__name__)

__all__ = [
    "EmbeddingFormatError",
    "EmbeddingSet",
    "ExtractorEndpoint",
    "ExtractorError",
    "decode_emb1",
    "encode_emb1",
    "fetch_embeddings",
    "import_csv",
    "read_embeddings",
    "write_embeddings",
]

MAGIC = "EMB1"
_F32LE = np.dtype("<f4")


class EmbeddingFormatError(ValueError):
    pass


def _first_nonfinite_row(vectors: np.ndarray) -> int | None:
    bad = ~np.isfinite(vectors)
    if not bad.any():
        return None
    return int(np.argmax(bad.any(axis=1)))


class EmbeddingSet:
    """Row-aligned float32 vectors and their patch records."""

    def __init__(self, vectors, records: Sequence[PatchRecord]):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if len(records) != vectors.shape[0]:
            raise ValueError(f"{len(records)} records for {vectors.shape[0]} vectors")
        row = _first_nonfinite_row(vectors)
        if row is not None:
            raise ValueError(f"non-finite value row {row}")
        vectors.setflags(write=False)
        self.vectors = vectors
        self.records = tuple(records)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingSet":
        return cls(np.zeros((0, dim), dtype=np.float32), [])

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label_id for r in self.records], dtype=np.int64)

    @property
    def patch_ids(self) -> list[str]:
        return [r.patch_id for r in self.records]

    def subset(self, index) -> "EmbeddingSet":
        index = np.asarray(index)
        index = np.flatnonzero(index) if index.dtype == bool else index.astype(np.int64).reshape(-1)
        return EmbeddingSet(self.vectors[index], [self.records[i] for i in index])

    def with_vectors(self, vectors) -> "EmbeddingSet":
        """Same records, new vectors (e.g. a PCA projection)."""
        return EmbeddingSet(vectors, self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
            and self.records == other.records
        )

    def __repr__(self) -> str:
        return f"EmbeddingSet(count={self.count}, dim={self.dim})"


def encode_emb1(emb: EmbeddingSet) -> bytes:
    header = json.dumps(
        {"magic": MAGIC, "dim": emb.dim, "count": emb.count, "dtype": "f32le"},
        separators=(",", ":"),
    )
    meta = "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in emb.records)
    return header.encode() + b"\n" + emb.vectors.astype(_F32LE, copy=False).tobytes() + meta.encode()


def decode_emb1(data: bytes, source: str = "<bytes>") -> EmbeddingSet:
    nl = data.find(b"\n")
    if nl < 0:
        raise EmbeddingFormatError(f"{source}: missing header line")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise EmbeddingFormatError(f"{source}: header is not JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise EmbeddingFormatError(f"{source}: magic mismatch (expected {MAGIC!r})")
    if header.get("dtype") != "f32le":
        raise EmbeddingFormatError(f"{source}: unsupported dtype {header.get('dtype')!r}")
    dim, count = int(header["dim"]), int(header["count"])
    if dim < 1 or count < 0:
        raise EmbeddingFormatError(f"{source}: invalid dim/count {dim}/{count}")

    start = nl + 1
    row_bytes = 4 * dim
    payload = data[start : start + row_bytes * count]
    if len(payload) < row_bytes * count:
        raise EmbeddingFormatError(f"{source}: truncated payload at row {len(payload) // row_bytes}")
    vectors = np.frombuffer(payload, dtype=_F32LE).reshape(count, dim).astype(np.float32)
    row = _first_nonfinite_row(vectors)
    if row is not None:
        raise EmbeddingFormatError(f"{source}: non-finite value row {row}")

    lines = [ln for ln in data[start + row_bytes * count :].split(b"\n") if ln.strip()]
    if len(lines) != count:
        raise EmbeddingFormatError(
            f"{source}: metadata/count mismatch: {len(lines)} records for {count} vectors"
        )
    records = []
    for i, ln in enumerate(lines):
        try:
            records.append(PatchRecord.from_json(json.loads(ln)))
        except (ValueError, TypeError, KeyError) as exc:
            raise EmbeddingFormatError(f"{source}: bad metadata record {i}: {exc}") from exc
    return EmbeddingSet(vectors, records)


def read_embeddings(path: str | Path) -> EmbeddingSet:
    return decode_emb1(Path(path).read_bytes(), str(path))


def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    Path(path).write_bytes(encode_emb1(emb))


def import_csv(path: str | Path, dim: int) -> EmbeddingSet:
    """Read ``patch_id,slide_id,label_id,v0..v{dim-1}`` rows; a header row is optional."""
    records, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        data_row = 0
        for line_no, row in enumerate(reader, 1):
            if not row or all(not c.strip() for c in row):
                continue
            if line_no == 1 and row[0].strip().lower() == "patch_id":
                continue
            data_row += 1
            if len(row) - 3 != dim:
                raise EmbeddingFormatError(f"row {data_row}: expected {dim} values, got {max(len(row) - 3, 0)}")
            try:
                label = int(row[2])
                values = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise EmbeddingFormatError(f"row {data_row}: {exc}") from exc
            records.append(PatchRecord(patch_id=row[0].strip(), slide_id=row[1].strip(), label_id=label))
            rows.append(values)
    vectors = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)
    try:
        return EmbeddingSet(vectors, records)
    except ValueError as exc:
        raise EmbeddingFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# extractor service client


class ExtractorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorEndpoint:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 2
    batch_size: int = 16
    max_in_flight: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ValueError("max_retries must be >= 0 and max_in_flight >= 1")


def _post_with_retry(client: httpx.Client, url: str, body: dict, ep: ExtractorEndpoint,
                     sleep: Callable[[float], None]) -> dict:
    last = "no attempt made"
    for attempt in range(ep.max_retries + 1):
        if attempt:
            sleep(0.5 * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body, timeout=ep.timeout)
        except httpx.HTTPError as exc:
            last = f"{type(exc).__name__}: {exc}"
            continue
        if resp.status_code == 200:
            try:
                return resp.json()
            except ValueError as exc:
                raise ExtractorError(f"extractor returned invalid JSON: {exc}") from exc
        last = f"HTTP {resp.status_code}"
    raise ExtractorError(f"extractor request failed after {ep.max_retries + 1} attempts: {last}")


def fetch_embeddings(
    patches: Sequence[str | Path],
    ep: ExtractorEndpoint,
    records: Sequence[PatchRecord] | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingSet:
    """Embed patch images through ``POST {base_url}/embed``.

    Image ids are the file stems; rows come back in input order. ``records``
    (aligned with ``patches``) supplies metadata; otherwise bare records
    keyed by the stem are used.
    """
    paths = [Path(p) for p in patches]
    if records is None:
        records = [PatchRecord(patch_id=p.stem, slide_id="", label_id=-1) for p in paths]
    if len(records) != len(paths):
        raise ValueError("records must align with patches")
    ids = [p.stem for p in paths]
    if len(set(ids)) != len(ids):
        raise ValueError("patch file stems must be unique")

    batches = [list(range(i, min(i + ep.batch_size, len(paths)))) for i in range(0, len(paths), ep.batch_size)]
    url = ep.base_url.rstrip("/") + "/embed"
    own_client = client is None
    client = client or httpx.Client()

    def run(batch: list[int]) -> dict:
        images = []
        for i in batch:
            data = paths[i].read_bytes()
            fmt = paths[i].suffix.lstrip(".").lower() or "png"
            images.append({"id": ids[i], "format": fmt, "data_b64": base64.b64encode(data).decode("ascii")})
        return _post_with_retry(client, url, {"images": images}, ep, sleep)

    try:
        if ep.max_in_flight > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=ep.max_in_flight) as pool:
                responses = list(pool.map(run, batches))
        else:
            responses = [run(b) for b in batches]
    finally:
        if own_client:
            client.close()

    dim: int | None = None
    vectors = np.zeros((len(paths), 0), dtype=np.float32)
    for batch, resp in zip(batches, responses):
        try:
            got_dim = int(resp["dim"])
            by_id = {str(e["id"]): e["vector"] for e in resp["embeddings"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise ExtractorError(f"malformed extractor response: {exc}") from exc
        if dim is None:
            dim = got_dim
            vectors = np.zeros((len(paths), dim), dtype=np.float32)
        elif got_dim != dim:
            raise ExtractorError(f"dim inconsistency: batch reported {got_dim}, expected {dim}")
        want = {ids[i] for i in batch}
        missing = sorted(want - set(by_id))
        if missing:
            raise ExtractorError(f"missing embedding for id {missing[0]!r}")
        extra = sorted(set(by_id) - want)
        if extra:
            raise ExtractorError(f"unexpected embedding id {extra[0]!r}")
        for i in batch:
            vec = np.asarray(by_id[ids[i]], dtype=np.float64)
            if vec.shape != (dim,):
                raise ExtractorError(f"dim inconsistency: id {ids[i]!r} has {vec.size} values, expected {dim}")
            vectors[i] = vec
    if dim is None:
        raise ExtractorError("no patches to embed")
    return EmbeddingSet(vectors, records)
