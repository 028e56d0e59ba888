"""Frozen reference index with exact nearest-neighbour pose retrieval.

Two interchangeable backends return identical rows: a linear scan and a
kd-tree (scipy's ``cKDTree``, refined by an exact re-rank so both break ties
the same way: smallest squared distance, then smallest ``source_id``).

Index file layout (little endian)::

    b"PMIDX01\\n" | u32 header length | UTF-8 JSON header
    | float32 embeddings (count x dim) | float64 poses (count x 3) | int64 source ids
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from posemetric.encoder import MLP, read_header
from posemetric.pose_math import EulerPose

INDEX_MAGIC = b"PMIDX01\n"
BACKENDS = ("linear", "kdtree")


def _sq_dists(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = rows - q
    return (diff * diff).sum(axis=1)


@dataclass
class ReferenceIndex:
    embeddings: np.ndarray
    angles: np.ndarray
    source_ids: np.ndarray
    backend: str = "kdtree"
    encoder_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1, 3)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.embeddings.ndim != 2 or not (len(self.embeddings) == len(self.angles) == len(self.source_ids)):
            raise ValueError("embeddings, poses and ids must have one row per reference")
        self._rows = self.embeddings.astype(np.float64)
        self._tree = cKDTree(self._rows) if self.backend == "kdtree" and len(self._rows) else None
        self.frozen = True

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.source_ids)

    def with_backend(self, backend: str) -> "ReferenceIndex":
        return ReferenceIndex(self.embeddings, self.angles, self.source_ids, backend, self.encoder_hash, dict(self.meta))

    def _check(self, q: np.ndarray) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("index is empty")
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.dim:
            raise ValueError(f"query dimension {q.shape[-1]} != index dimension {self.dim}")
        return q

    def _pick(self, candidates: np.ndarray, q: np.ndarray) -> tuple[int, float]:
        d2 = _sq_dists(self._rows[candidates], q)
        best = d2.min()
        tied = candidates[d2 == best]
        row = int(tied[np.argmin(self.source_ids[tied])])
        return row, float(best)

    def search(self, embedding: np.ndarray) -> tuple[int, float]:
        """Row index and squared distance of the nearest reference."""
        q = self._check(embedding)
        if self._tree is None:
            return self._pick(np.arange(len(self)), q)
        dist, _ = self._tree.query(q, k=1)
        # the exact re-rank below decides; the ball only has to contain the ties
        radius = dist * (1.0 + 1e-9) + 1e-12
        return self._pick(np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64), q)

    def search_many(self, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = self._check(np.atleast_2d(embeddings))
        rows = np.empty(len(q), dtype=np.int64)
        d2 = np.empty(len(q))
        if self._tree is None:
            for k, v in enumerate(q):
                rows[k], d2[k] = self._pick(np.arange(len(self)), v)
            return rows, d2
        dist, _ = self._tree.query(q, k=1)
        balls = self._tree.query_ball_point(q, dist * (1.0 + 1e-9) + 1e-12)
        for k, (v, ball) in enumerate(zip(q, balls)):
            rows[k], d2[k] = self._pick(np.asarray(ball, dtype=np.int64), v)
        return rows, d2

    def pose(self, row: int) -> EulerPose:
        return EulerPose(*self.angles[row])


def build_index(refs, encoder_r: MLP, backend: str = "kdtree", encoder_hash: str = "", meta: dict | None = None) -> ReferenceIndex:
    """Embed every reference rendering with the render encoder.

    ``refs`` is a list of (EulerPose, render_feat) pairs, optionally with a
    third source-id element, or an ``(angles, feats, ids)`` array triple.
    """
    if isinstance(refs, tuple) and len(refs) == 3 and isinstance(refs[0], np.ndarray):
        angles, feats, ids = refs
    else:
        refs = list(refs)
        if not refs:
            raise ValueError("no references to index")
        angles = np.array([r[0].as_array() for r in refs])
        feats = np.stack([np.asarray(r[1], dtype=float) for r in refs])
        ids = np.array([r[2] if len(r) > 2 else k for k, r in enumerate(refs)], dtype=np.int64)
    if len(angles) == 0:
        raise ValueError("no references to index")
    emb = encoder_r.forward(np.asarray(feats, dtype=float))
    return ReferenceIndex(emb, angles, ids, backend, encoder_hash, dict(meta or {}))


def query(index: ReferenceIndex, camera_feat: np.ndarray, encoder_c: MLP) -> tuple[EulerPose, float, int]:
    """Predicted pose, L2 embedding distance and source id of the nearest reference."""
    row, d2 = index.search(encoder_c.forward(np.asarray(camera_feat, dtype=float)))
    return index.pose(row), float(np.sqrt(d2)), int(index.source_ids[row])


def query_many(index: ReferenceIndex, camera_feats: np.ndarray, encoder_c: MLP):
    rows, d2 = index.search_many(encoder_c.forward(np.atleast_2d(camera_feats)))
    return index.angles[rows], np.sqrt(d2), index.source_ids[rows]


# ---------------------------------------------------------------- persistence


def save_index(index: ReferenceIndex, path) -> str:
    header = {
        "format": "posemetric-index",
        "version": 1,
        "dim": index.dim,
        "count": len(index),
        "backend": index.backend,
        "encoder_hash": index.encoder_hash,
        "meta": index.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = b"".join(
        [
            INDEX_MAGIC,
            struct.pack("<I", len(head)),
            head,
            index.embeddings.astype("<f4").tobytes(),
            index.angles.astype("<f8").tobytes(),
            index.source_ids.astype("<i8").tobytes(),
        ]
    )
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_index(path, backend: str | None = None) -> ReferenceIndex:
    data = Path(path).read_bytes()
    header, offset = read_header(data, INDEX_MAGIC)
    n, dim = header["count"], header["dim"]
    emb = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
    offset += 4 * n * dim
    angles = np.frombuffer(data, dtype="<f8", count=3 * n, offset=offset).reshape(n, 3)
    offset += 8 * 3 * n
    ids = np.frombuffer(data, dtype="<i8", count=n, offset=offset)
    if offset + 8 * n != len(data):
        raise ValueError("index file size does not match its header")
    return ReferenceIndex(emb.copy(), angles.copy(), ids.copy(), backend or header["backend"], header["encoder_hash"], header.get("meta", {}))


# ---------------------------------------------------------------- latency


@dataclass
class BenchReport:
    n_queries: int
    repetitions: int
    embed_times: list = field(default_factory=list)
    search_times: list = field(default_factory=list)

    @property
    def embed_mean(self) -> float | None:
        return float(np.mean(self.embed_times)) if self.embed_times else None

    @property
    def search_mean(self) -> float | None:
        return float(np.mean(self.search_times)) if self.search_times else None

    @property
    def embed_fraction(self) -> float | None:
        if not self.embed_times:
            return None
        return self.embed_mean / (self.embed_mean + self.search_mean)

    def summary(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "repetitions": self.repetitions,
            "embed_mean_s": self.embed_mean,
            "search_mean_s": self.search_mean,
            "embed_fraction": self.embed_fraction,
        }


def benchmark(index: ReferenceIndex, queries, encoder_c: MLP, repetitions: int = 1000) -> BenchReport:
    """Per-query mean wall-clock time of the embedding and the search stage."""
    queries = [np.asarray(q, dtype=float) for q in queries]
    report = BenchReport(len(queries), repetitions)
    for q in queries:
        embed = search = 0.0
        for _ in range(repetitions):
            t0 = time.perf_counter()
            e = encoder_c.forward(q)
            t1 = time.perf_counter()
            index.search(e)
            t2 = time.perf_counter()
            embed += t1 - t0
            search += t2 - t1
        report.embed_times.append(embed / repetitions)
        report.search_times.append(search / repetitions)
    return report
