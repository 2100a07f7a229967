"""Weight-free representation store that stands in for embedding tables.

Two growable tables map opaque integer ids to d-dimensional float32 vectors.
Reading an id that was never written yields the zero vector. Nothing stored
here is ever a graph node, so optimizer steps cannot reach it.
"""

from __future__ import annotations

import io
import struct
from itertools import repeat
from pathlib import Path

import numpy as np

MAGIC = b"FELC"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")

USER = "user"
ITEM = "item"
KINDS = (USER, ITEM)


class CacheFormatError(ValueError):
    """A snapshot could not be read back (corrupt bytes or wrong dimension)."""


class _Table:
    __slots__ = ("dim", "rows", "ids", "data")

    def __init__(self, dim: int):
        self.dim = dim
        self.rows: dict[int, int] = {}
        self.ids: list[int] = []
        self.data = np.zeros((16, dim), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    def _grow(self, need: int) -> None:
        cap = self.data.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        grown = np.zeros((cap, self.dim), dtype=np.float32)
        grown[: len(self.ids)] = self.data[: len(self.ids)]
        self.data = grown

    def row_of(self, key: int) -> int:
        row = self.rows.get(key)
        if row is None:
            row = len(self.ids)
            self._grow(row + 1)
            self.rows[key] = row
            self.ids.append(key)
        return row

    def put_many(self, keys, vectors: np.ndarray) -> None:
        rows = np.fromiter((self.row_of(int(k)) for k in keys), dtype=np.intp, count=len(keys))
        # numpy leaves repeated-index assignment order unspecified; keep the last occurrence.
        _, last_rev = np.unique(rows[::-1], return_index=True)
        last = len(rows) - 1 - last_rev
        self.data[rows[last]] = vectors[last]

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        flat = keys.reshape(-1).tolist()
        rows = np.fromiter(map(self.rows.get, flat, repeat(-1)), dtype=np.intp, count=len(flat))
        out = np.zeros((len(flat), self.dim), dtype=np.float32)
        hit = rows >= 0
        out[hit] = self.data[rows[hit]]
        return out.reshape(keys.shape + (self.dim,))

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.ids)
        return np.asarray(self.ids, dtype=np.int64), self.data[:n].copy()


class RepresentationCache:
    """User and item lookup tables of fixed dimension ``dim``; no eviction."""

    def __init__(self, dim: int = 128):
        if dim <= 0:
            raise ValueError("cache dimension must be positive")
        self.dim = dim
        self._tables = {USER: _Table(dim), ITEM: _Table(dim)}

    def _table(self, kind: str) -> _Table:
        try:
            return self._tables[kind]
        except KeyError:
            raise ValueError(f"unknown entity kind {kind!r}; expected 'user' or 'item'") from None

    def __len__(self) -> int:
        return sum(len(t) for t in self._tables.values())

    def size(self, kind: str | None = None) -> int:
        return len(self) if kind is None else len(self._table(kind))

    def __contains__(self, key: tuple[str, int]) -> bool:
        kind, entity = key
        return int(entity) in self._table(kind).rows

    def get(self, kind: str, entity: int) -> np.ndarray:
        table = self._table(kind)
        row = table.rows.get(int(entity))
        if row is None:
            return np.zeros(self.dim, dtype=np.float32)
        return table.data[row].copy()

    def put(self, kind: str, entity: int, vector) -> None:
        vector = np.asarray(vector)
        if vector.shape != (self.dim,):
            raise ValueError(f"put: expected a vector of length {self.dim}, got shape {vector.shape}")
        table = self._table(kind)
        row = table.row_of(int(entity))  # may reallocate table.data
        table.data[row] = vector

    def put_many(self, kind: str, entities, vectors) -> None:
        """Write rows in order; for repeated ids the last row wins."""
        vectors = np.asarray(vectors)
        entities = np.asarray(entities).reshape(-1)
        if vectors.shape != (len(entities), self.dim):
            raise ValueError(
                f"put_many: expected vectors of shape ({len(entities)}, {self.dim}), got {vectors.shape}"
            )
        self._table(kind).put_many(entities, vectors)

    def gather(self, kind: str, entities: np.ndarray) -> np.ndarray:
        """Vectors for an integer id array of any shape; misses (and negative pad ids) read as zeros."""
        return self._table(kind).lookup(np.asarray(entities, dtype=np.int64))

    def ids(self, kind: str) -> np.ndarray:
        return np.asarray(self._table(kind).ids, dtype=np.int64)

    def matrix(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """All ``(ids, vectors)`` of one table in insertion order."""
        return self._table(kind).matrix()

    def clear(self) -> None:
        self._tables = {USER: _Table(self.dim), ITEM: _Table(self.dim)}

    def clone(self) -> RepresentationCache:
        other = RepresentationCache(self.dim)
        for kind in KINDS:
            src, dst = self._tables[kind], other._tables[kind]
            dst.rows = dict(src.rows)
            dst.ids = list(src.ids)
            dst.data = src.data.copy()
        return other

    # -- persistence --------------------------------------------------------
    def _record_dtype(self) -> np.dtype:
        return np.dtype([("id", "<u8"), ("vec", "<f4", (self.dim,))])

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        users, items = self._tables[USER], self._tables[ITEM]
        buf.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(users), len(items)))
        rec = self._record_dtype()
        for table in (users, items):
            ids, vecs = table.matrix()
            records = np.empty(len(ids), dtype=rec)
            records["id"] = ids.astype(np.uint64)
            records["vec"] = vecs
            buf.write(records.tobytes())
        return buf.getvalue()

    def load_bytes(self, blob: bytes) -> None:
        if len(blob) < _HEADER.size:
            raise CacheFormatError("snapshot truncated: header incomplete")
        magic, version, dim, n_users, n_items = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CacheFormatError(f"not a cache snapshot (magic {magic!r})")
        if version != VERSION:
            raise CacheFormatError(f"unsupported snapshot version {version}")
        if dim != self.dim:
            raise CacheFormatError(f"snapshot dimension {dim} does not match cache dimension {self.dim}")
        rec = self._record_dtype()
        expected = _HEADER.size + (n_users + n_items) * rec.itemsize
        if len(blob) != expected:
            raise CacheFormatError(f"snapshot has {len(blob)} bytes, header implies {expected}")
        records = np.frombuffer(blob, dtype=rec, offset=_HEADER.size)
        self.clear()
        for kind, part in ((USER, records[:n_users]), (ITEM, records[n_users:])):
            self._tables[kind].put_many(part["id"].astype(np.int64), part["vec"])

    def snapshot(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def restore(self, path) -> None:
        self.load_bytes(Path(path).read_bytes())

    @classmethod
    def from_snapshot(cls, path, dim: int) -> RepresentationCache:
        cache = cls(dim)
        cache.restore(path)
        return cache

    # -- text export --------------------------------------------------------
    def export_tsv(self, path) -> int:
        """Write ``kind, id, v0..v{d-1}`` rows with a header; returns the row count."""
        rows = 0
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(["kind", "id"] + [f"v{i}" for i in range(self.dim)]) + "\n")
            for kind in KINDS:
                ids, vecs = self.matrix(kind)
                for entity, vec in zip(ids, vecs):
                    fh.write(f"{kind}\t{entity}\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
                    rows += 1
        return rows

    @classmethod
    def from_tsv(cls, path) -> RepresentationCache:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            cache = cls(len(header) - 2)
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != cache.dim + 2:
                    raise CacheFormatError(f"{path}:{lineno}: expected {cache.dim + 2} fields, got {len(parts)}")
                cache.put(parts[0], int(parts[1]), np.asarray(parts[2:], dtype=np.float32))
        return cache
