"""Exact nearest-reference retrieval and decentrality-stratified metrics.

Retrieval is the plain argmax of cosine similarity over the reference
database (embeddings are unit rows, so dot products are cosines), with
ties broken toward the smaller id. Metrics: R@K for K in {1, 5, 10, 1%}
(1% of the database size, at least 1), the hit rate (top-1 tile
footprint contains the query location), and R@1 per decentrality
subset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from crossview.errors import BadMagicError, BadVersionError, TruncatedFileError

__all__ = [
    "EmbeddingDatabase",
    "EvalReport",
    "build_database",
    "top_k",
    "recall_at",
    "hit_rate",
    "stratified_eval",
    "save_db",
    "load_db",
]

MAGIC = b"CVGE"
VERSION = 1
_KIND_CODES = {"queries": 0, "references": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class EmbeddingDatabase:
    """N x C unit-row matrix with ids and per-row geo metadata."""

    matrix: np.ndarray
    ids: list
    kind: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError(f"matrix must be N x C, got {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError("ids and matrix rows differ in count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"kind must be queries or references, got {self.kind!r}")
        if self.matrix.shape[0]:
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("embedding rows must be L2-normalized")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_database(
    matrix, ids, kind: str, metadata: Optional[dict] = None, normalize: bool = True
) -> EmbeddingDatabase:
    """Assemble a database, optionally L2-normalizing the rows first."""
    m = np.asarray(matrix, dtype=np.float64)
    if normalize and m.size:
        m = m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    return EmbeddingDatabase(
        matrix=m.astype(np.float32),
        ids=list(ids),
        kind=kind,
        metadata=metadata or {},
    )


def _scores(db: EmbeddingDatabase, q: np.ndarray) -> np.ndarray:
    return db.matrix.astype(np.float64) @ np.asarray(q, dtype=np.float64)


def top_k(db: EmbeddingDatabase, q, k: int):
    """Exact top-k (id, cosine) pairs, scores descending, ties to smaller id."""
    if db.n == 0:
        raise ValueError("empty database")
    if not 1 <= k <= db.n:
        raise ValueError(f"k must be in [1, {db.n}], got {k}")
    s = _scores(db, q)
    order = np.lexsort((np.asarray(db.ids), -s))[:k]
    return [(db.ids[i], float(s[i])) for i in order]


def _rank_of_gt(
    refs: EmbeddingDatabase, queries: EmbeddingDatabase, gt: dict
) -> np.ndarray:
    """1-based rank of each query's ground-truth reference."""
    ref_ids = np.asarray(refs.ids)
    id_pos = {rid: i for i, rid in enumerate(refs.ids)}
    s = queries.matrix.astype(np.float64) @ refs.matrix.astype(np.float64).T
    ranks = np.empty(queries.n, dtype=np.int64)
    for qi, qid in enumerate(queries.ids):
        if qid not in gt:
            raise ValueError(f"query {qid} has no ground-truth reference")
        rid = gt[qid]
        if rid not in id_pos:
            raise ValueError(f"ground-truth reference {rid} not in database")
        s_gt = s[qi, id_pos[rid]]
        ahead = (s[qi] > s_gt) | ((s[qi] == s_gt) & (ref_ids < rid))
        ranks[qi] = ahead.sum() + 1
    return ranks


def _resolve_k(k: Union[int, str], n_refs: int) -> int:
    if k == "1%":
        return max(1, int(np.ceil(n_refs / 100.0)))
    return int(k)


def recall_at(
    refs: EmbeddingDatabase,
    queries: EmbeddingDatabase,
    gt: dict,
    k: Union[int, str],
) -> float:
    """Percentage of queries whose ground truth ranks in the top k.

    ``k`` may be the string "1%", meaning max(1, ceil(N/100)).
    """
    ranks = _rank_of_gt(refs, queries, gt)
    return float((ranks <= _resolve_k(k, refs.n)).mean() * 100.0)


def _top1_ids(refs: EmbeddingDatabase, queries: EmbeddingDatabase) -> list:
    ref_ids = np.asarray(refs.ids)
    s = queries.matrix.astype(np.float64) @ refs.matrix.astype(np.float64).T
    out = []
    for qi in range(queries.n):
        out.append(int(ref_ids[np.lexsort((ref_ids, -s[qi]))[0]]))
    return out


def hit_rate(refs: EmbeddingDatabase, queries: EmbeddingDatabase) -> float:
    """Percentage of queries whose top-1 tile footprint contains them.

    Requires tile centers plus tile_size in the reference metadata and
    pano locations in the query metadata. Always >= R@1: the true tile
    covers its own pano.
    """
    tiles = refs.metadata.get("tiles")
    tile_size = refs.metadata.get("tile_size")
    panos = queries.metadata.get("panos")
    if tiles is None or tile_size is None or panos is None:
        raise ValueError("hit_rate needs geometry metadata on both databases")
    half = float(tile_size) / 2.0
    hits = 0
    for qid, rid in zip(queries.ids, _top1_ids(refs, queries)):
        info = panos[str(qid)]
        cx, cy = tiles[str(rid)]
        if abs(info["x"] - cx) <= half and abs(info["y"] - cy) <= half:
            hits += 1
    return 100.0 * hits / queries.n


@dataclass
class EvalReport:
    """Retrieval metrics in percent; absent subsets are None, not zero."""

    r_at_1: float
    r_at_5: float
    r_at_10: float
    r_at_1pct: float
    hit_rate: Optional[float]
    subset_r1: dict
    n_queries: int
    n_references: int

    def to_csv(self) -> str:
        cols = [
            "n_queries",
            "n_references",
            "r_at_1",
            "r_at_5",
            "r_at_10",
            "r_at_1pct",
            "hit_rate",
            "s1_r1",
            "s2_r1",
            "s3_r1",
            "s4_r1",
        ]
        def fmt(v):
            return "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

        vals = [
            self.n_queries,
            self.n_references,
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.r_at_1pct,
            self.hit_rate,
            self.subset_r1.get("S1"),
            self.subset_r1.get("S2"),
            self.subset_r1.get("S3"),
            self.subset_r1.get("S4"),
        ]
        return ",".join(cols) + "\n" + ",".join(fmt(v) for v in vals) + "\n"

    def format_table(self) -> str:
        rows = [
            ("queries", str(self.n_queries)),
            ("references", str(self.n_references)),
            ("R@1", f"{self.r_at_1:.2f}"),
            ("R@5", f"{self.r_at_5:.2f}"),
            ("R@10", f"{self.r_at_10:.2f}"),
            ("R@1%", f"{self.r_at_1pct:.2f}"),
            ("hit rate", "-" if self.hit_rate is None else f"{self.hit_rate:.2f}"),
        ]
        for sub in ("S1", "S2", "S3", "S4"):
            v = self.subset_r1.get(sub)
            rows.append((f"R@1 {sub}", "-" if v is None else f"{v:.2f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def stratified_eval(
    refs: EmbeddingDatabase,
    queries: EmbeddingDatabase,
    gt: Optional[dict] = None,
    subsets: Optional[dict] = None,
) -> EvalReport:
    """Overall metrics plus R@1 restricted to each decentrality subset.

    Ground truth defaults to the query metadata's tile ids, or, when a
    database is evaluated against itself without metadata, to identity.
    Subset labels default to the query metadata. Monotone degradation
    across S1..S4 is reported, never enforced.
    """
    panos = queries.metadata.get("panos", {})
    if gt is None:
        if panos:
            gt = {qid: panos[str(qid)]["tile_id"] for qid in queries.ids}
        else:
            gt = {qid: qid for qid in queries.ids}
    if subsets is None:
        subsets = {
            qid: panos[str(qid)].get("subset")
            for qid in queries.ids
            if str(qid) in panos
        }

    ranks = _rank_of_gt(refs, queries, gt)
    def pct(k):
        return float((ranks <= _resolve_k(k, refs.n)).mean() * 100.0)

    try:
        hr = hit_rate(refs, queries)
    except ValueError:
        hr = None

    subset_r1 = {}
    labels = np.array([subsets.get(qid) for qid in queries.ids], dtype=object)
    for sub in ("S1", "S2", "S3", "S4"):
        mask = labels == sub
        subset_r1[sub] = float((ranks[mask] <= 1).mean() * 100.0) if mask.any() else None

    return EvalReport(
        r_at_1=pct(1),
        r_at_5=pct(5),
        r_at_10=pct(10),
        r_at_1pct=pct("1%"),
        hit_rate=hr,
        subset_r1=subset_r1,
        n_queries=queries.n,
        n_references=refs.n,
    )


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, file ended after {len(buf)}")
    return buf


def save_db(db: EmbeddingDatabase, path) -> None:
    """Write the CVGE binary format (little-endian throughout)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"ids": list(db.ids), "metadata": db.metadata}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<II", db.n, db.dim))
        fh.write(struct.pack("<B", _KIND_CODES[db.kind]))
        fh.write(np.ascontiguousarray(db.matrix, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_db(path) -> EmbeddingDatabase:
    """Read a CVGE file; malformed inputs raise typed format errors."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise BadMagicError(MAGIC, magic)
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise BadVersionError(f"unsupported CVGE version {version}")
        n, c = struct.unpack("<II", _read_exact(fh, 8))
        (kind_code,) = struct.unpack("<B", _read_exact(fh, 1))
        if kind_code not in _KIND_NAMES:
            raise BadVersionError(f"unknown database kind code {kind_code}")
        matrix = np.frombuffer(_read_exact(fh, n * c * 4), dtype="<f4").reshape(n, c)
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        blob = json.loads(_read_exact(fh, meta_len))
    return EmbeddingDatabase(
        matrix=matrix.copy(),
        ids=blob["ids"],
        kind=_KIND_NAMES[kind_code],
        metadata=blob["metadata"],
    )
