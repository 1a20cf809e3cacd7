"""Persistent embedding store with exact squared-Euclidean search.

For unit vectors ``|q - r|^2 = 2 - 2 q.r``, so a query is one
matrix-vector product.  Ties are broken by reference id.

File layout (little-endian): ``b"CVRE"``, version u32, count u64, dim u32,
checkpoint hash (u16 length + ASCII), then per record a u16 id length,
the UTF-8 id and ``dim`` float32 values.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .encoder import Embedding
from .errors import DataError, FormatError, InvalidInputError, ShapeError
from .metrics import QueryRanking

STORE_MAGIC = b"CVRE"
STORE_VERSION = 1
UNIT_TOL = 1e-4


class EmbeddingStore:
    def __init__(self, dim: int, checkpoint_hash: str = ""):
        if dim < 1:
            raise InvalidInputError("store dimension must be >= 1")
        self.dim = dim
        self.checkpoint_hash = checkpoint_hash
        self.matrix = np.zeros((0, dim), dtype=np.float32)
        self.ids: list[str] = []
        self._index: dict[str, int] = {}
        self._m64: np.ndarray | None = None
        self._id_array: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_embeddings(cls, embeddings, dim: int | None = None, checkpoint_hash: str = ""):
        embeddings = list(embeddings)
        if dim is None:
            if not embeddings:
                raise InvalidInputError("dimension required for an empty store")
            dim = len(embeddings[0].vector)
        store = cls(dim, checkpoint_hash)
        store.extend([e.track_id for e in embeddings], np.array([e.vector for e in embeddings]).reshape(-1, dim))
        return store

    def extend(self, ids, vectors) -> None:
        """Append rows; on any validation failure the store is left unchanged."""
        ids = [str(i) for i in ids]
        vecs = np.asarray(vectors, dtype=np.float32)
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise ShapeError(f"store holds {self.dim}-dim vectors, got shape {vecs.shape}")
        if len(ids) != vecs.shape[0]:
            raise InvalidInputError("ids and vectors differ in length")
        if len(set(ids)) != len(ids) or any(i in self._index for i in ids):
            raise DataError("duplicate embedding id")
        if not np.all(np.isfinite(vecs)):
            raise InvalidInputError("embeddings contain NaN or Inf")
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise InvalidInputError("store rows must be unit-norm")
        for i, tid in enumerate(ids, start=len(self.ids)):
            self._index[tid] = i
        self.ids.extend(ids)
        self.matrix = np.concatenate([self.matrix, vecs]) if len(self.matrix) else vecs.copy()
        self._m64 = None
        self._id_array = None

    def append(self, track_id: str, vector) -> None:
        self.extend([track_id], np.asarray(vector).reshape(1, -1))

    def vector(self, track_id: str) -> np.ndarray:
        return self.matrix[self._index[track_id]]

    def _matrix64(self) -> np.ndarray:
        if self._m64 is None:
            self._m64 = self.matrix.astype(np.float64)
        return self._m64

    def _ids(self) -> np.ndarray:
        if self._id_array is None:
            self._id_array = np.array(self.ids, dtype=str)
        return self._id_array

    def sq_distances(self, queries) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, self.dim) if q.size else q.reshape(0, self.dim)
        if q.shape[1] != self.dim:
            raise ShapeError(f"query dim {q.shape[1]} != store dim {self.dim}")
        d = np.maximum(2.0 - 2.0 * (q @ self._matrix64().T), 0.0)
        return d[0] if single else d

    # --- search ------------------------------------------------------------

    def query_topk(self, query, k: int = 10) -> list[tuple[str, float]]:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        vec = query.vector if isinstance(query, Embedding) else query
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.dim:
            raise ShapeError(f"query dim {vec.size} != store dim {self.dim}")
        if not self.ids:
            return []
        d = self.sq_distances(vec)
        k = min(k, d.size)
        kth = np.partition(d, k - 1)[k - 1]
        cand = np.nonzero(d <= kth)[0]
        order = cand[np.lexsort((self._ids()[cand], d[cand]))][:k]
        return [(self.ids[i], float(d[i])) for i in order]

    def cross_distances(self, query_ids, query_vectors, work_of: dict | None = None,
                        exclude_self: bool = False, block: int = 256) -> list[QueryRanking]:
        """Full ranking of the store for each query; ``work_of`` maps track id -> work id."""
        qv = np.asarray(query_vectors, dtype=np.float64).reshape(-1, self.dim)
        query_ids = [str(q) for q in query_ids]
        ref_ids = self._ids()
        ref_works = None
        if work_of is not None:
            ref_works = np.array([work_of.get(t) for t in self.ids], dtype=object)
        results = []
        for start in range(0, len(query_ids), block):
            d_block = self.sq_distances(qv[start : start + block]) if len(self.ids) else \
                np.zeros((len(qv[start : start + block]), 0))
            for qid, d in zip(query_ids[start : start + block], d_block):
                keep = np.ones(d.size, dtype=bool)
                if exclude_self and qid in self._index:
                    keep[self._index[qid]] = False
                idx = np.nonzero(keep)[0]
                order = idx[np.lexsort((ref_ids[idx], d[idx]))]
                if ref_works is None:
                    cover = np.zeros(order.size, dtype=bool)
                else:
                    qw = work_of.get(qid)
                    cover = np.array([qw is not None and w == qw for w in ref_works[order]], dtype=bool)
                results.append(QueryRanking(qid, [self.ids[i] for i in order], d[order], cover))
        return results

    # --- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        h = self.checkpoint_hash.encode("ascii")
        parts = [STORE_MAGIC, struct.pack("<IQI", STORE_VERSION, len(self.ids), self.dim),
                 struct.pack("<H", len(h)), h]
        rows = np.ascontiguousarray(self.matrix, dtype="<f4")
        for tid, row in zip(self.ids, rows):
            b = tid.encode("utf-8")
            parts.append(struct.pack("<H", len(b)) + b + row.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingStore":
        if len(blob) < 22 or blob[:4] != STORE_MAGIC:
            raise FormatError("not a CVRE embedding store")
        version, count, dim = struct.unpack_from("<IQI", blob, 4)
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        if dim < 1:
            raise FormatError("store dimension is zero")
        pos = 20
        (hlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        checkpoint_hash = blob[pos : pos + hlen].decode("ascii", errors="replace")
        pos += hlen
        ids, rows = [], []
        row_bytes = 4 * dim
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                if pos + n + row_bytes > len(blob):
                    raise FormatError("store truncated")
                ids.append(blob[pos : pos + n].decode("utf-8"))
                pos += n
                rows.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=pos))
                pos += row_bytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"store record unreadable: {exc}") from exc
        if pos != len(blob):
            raise FormatError(f"store header says {count} records but {len(blob) - pos} bytes remain")
        store = cls(dim, checkpoint_hash)
        matrix = np.array(rows, dtype=np.float32).reshape(count, dim)
        try:
            store.extend(ids, matrix)
        except (DataError, InvalidInputError) as exc:
            raise FormatError(f"corrupt store: {exc}") from exc
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        return cls.from_bytes(Path(path).read_bytes())


def export_rankings_csv(results, path, top_k: int | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "reference_id", "sq_distance", "is_cover"])
        for r in results:
            n = len(r.reference_ids) if top_k is None else min(top_k, len(r.reference_ids))
            for i in range(n):
                w.writerow([r.query_id, i + 1, r.reference_ids[i], f"{r.sq_distances[i]:.8g}", int(r.is_cover[i])])
