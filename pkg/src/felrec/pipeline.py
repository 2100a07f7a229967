"""Interaction logs: ingestion, chronological splits, test partitions, histories, batches."""

from __future__ import annotations

import enum
from array import array
from collections import deque
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from felrec.encoder import ITEM_TYPE, PAD, USER_TYPE, SequenceBatch

FORMATS = ("movielens", "twitch", "canonical")


class DataError(ValueError):
    """Unreadable or malformed interaction data."""


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int | float
    index: int


@dataclass
class InteractionStream:
    """Chronologically ordered interactions stored column-wise.

    ``start`` is the stream index of the first row, so slices of a larger
    stream keep their global positions.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    start: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise DataError("stream columns have different lengths")

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, key):
        if isinstance(key, slice):
            lo, hi, step = key.indices(len(self))
            if step != 1:
                raise ValueError("stream slices must be contiguous")
            return InteractionStream(self.users[lo:hi], self.items[lo:hi], self.timestamps[lo:hi], self.start + lo)
        key = int(key)
        if key < 0:
            key += len(self)
        ts = self.timestamps[key]
        return Interaction(int(self.users[key]), int(self.items[key]), ts.item(), self.start + key)

    def __iter__(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            yield self[i]

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self))

    @classmethod
    def from_records(cls, records, start: int = 0) -> InteractionStream:
        records = list(records)
        if not records:
            return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64), start)
        users, items, ts = zip(*[(r[0], r[1], r[2]) for r in records])
        return cls(np.asarray(users), np.asarray(items), np.asarray(ts), start)

    @classmethod
    def concat(cls, parts) -> InteractionStream:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.timestamps for p in parts]),
            parts[0].start,
        )

    def same_as(self, other: InteractionStream) -> bool:
        return (
            self.start == other.start
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
        )


@dataclass
class Vocabulary:
    """Raw id strings in dense-id order, one list per entity kind."""

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for kind, raws in (("user", self.users), ("item", self.items)):
                for dense, raw in enumerate(raws):
                    fh.write(f"{kind}\t{raw}\t{dense}\n")

    @classmethod
    def read(cls, path) -> Vocabulary:
        vocab = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            kind, raw, dense = line.split("\t")
            target = vocab.users if kind == "user" else vocab.items
            if int(dense) != len(target):
                raise DataError(f"{path}:{lineno}: dense ids must be consecutive")
            target.append(raw)
        return vocab


# -- ingestion ---------------------------------------------------------------

def _parse_time(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _rows(path: Path, fmt: str) -> Iterator[tuple[int, str, str, str]]:
    with open(path, encoding="utf-8") as fh:
        if fmt == "movielens":
            header = fh.readline()
            if not header:
                return
            if not header.lower().startswith("userid"):
                raise DataError(f"{path}:1: expected MovieLens header 'userId,movieId,rating,timestamp'")
            lineno = 1
            for line in fh:
                lineno += 1
                parts = line.rstrip("\r\n").split(",")
                if len(parts) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
                yield lineno, parts[0], parts[1], parts[3]
        elif fmt == "twitch":
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\r\n").split(",")
                if len(parts) != 5:
                    raise DataError(f"{path}:{lineno}: expected 5 comma-separated fields, got {len(parts)}")
                # user, stream, streamer, start, stop; watch time is discarded
                yield lineno, parts[0], parts[1], parts[3]
        else:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\r\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                yield lineno, parts[0], parts[1], parts[2]


def ingest(path, fmt: str = "canonical") -> tuple[InteractionStream, Vocabulary]:
    """Read a log, sort it stably by time and assign dense ids by first appearance.

    Dense ids count from 0 in order of first appearance in the sorted stream.
    Equal timestamps keep their file order.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    path = Path(path)
    raw_users: dict[str, int] = {}
    raw_items: dict[str, int] = {}
    users, items = array("q"), array("q")
    times: list = []
    for lineno, user, item, ts in _rows(path, fmt):
        if not user or not item:
            raise DataError(f"{path}:{lineno}: empty user or item id")
        try:
            times.append(_parse_time(ts))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
        users.append(raw_users.setdefault(user, len(raw_users)))
        items.append(raw_items.setdefault(item, len(raw_items)))
    if not users:
        raise DataError(f"{path}: no interactions found")

    ts_arr = np.asarray(times)
    order = np.argsort(ts_arr, kind="stable")
    users_sorted = np.frombuffer(users, dtype=np.int64)[order]
    items_sorted = np.frombuffer(items, dtype=np.int64)[order]

    dense_users, user_order = _first_appearance(users_sorted)
    dense_items, item_order = _first_appearance(items_sorted)
    user_names = list(raw_users)
    item_names = list(raw_items)
    vocab = Vocabulary([user_names[i] for i in user_order], [item_names[i] for i in item_order])
    return InteractionStream(dense_users, dense_items, ts_arr[order]), vocab


def _first_appearance(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relabel ``ids`` 0, 1, 2, ... by first occurrence; also return old ids in new order."""
    uniq, first, inverse = np.unique(ids, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    by_first = np.argsort(first)
    rank[by_first] = np.arange(len(uniq))
    return rank[inverse], uniq[by_first]


def write_canonical(stream: InteractionStream, path, vocab: Vocabulary | None = None) -> None:
    """Write ``user<TAB>item<TAB>timestamp`` lines; raw ids when ``vocab`` is given."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, x, t in zip(stream.users.tolist(), stream.items.tolist(), stream.timestamps.tolist()):
            if vocab is not None:
                u, x = vocab.users[u], vocab.items[x]
            fh.write(f"{u}\t{x}\t{t}\n")


def read_prepared(path, start: int = 0) -> InteractionStream:
    """Read a canonical TSV whose ids are already dense integers (no remapping)."""
    users, items, times = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                times.append(_parse_time(parts[2]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field in prepared split") from None
    return InteractionStream(np.asarray(users, np.int64), np.asarray(items, np.int64), np.asarray(times), start)


# -- splits and partitions ---------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        if min(self.train, self.validation, self.test) < 0 or abs(self.train + self.validation + self.test - 1) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")


def split(stream: InteractionStream, spec: SplitSpec = SplitSpec()):
    """Contiguous (train, validation, test) parts with floor boundaries."""
    n = len(stream)
    if n < 10:
        raise DataError(f"cannot split {n} interactions; at least 10 are required")
    first = int(np.floor(spec.train * n))
    second = int(np.floor((spec.train + spec.validation) * n))
    return stream[:first], stream[first:second], stream[second:]


class PartitionLabel(enum.IntEnum):
    OBSERVED = 0
    NEW_USERS = 1
    NEW_ITEMS = 2

    @property
    def title(self) -> str:
        return ("observed", "new-users", "new-items")[self]


def partition_test(test: InteractionStream, train: InteractionStream) -> np.ndarray:
    """Label each test interaction by training-set membership of its user and item."""
    known_items = np.isin(test.items, train.items)
    known_users = np.isin(test.users, train.users)
    labels = np.full(len(test), PartitionLabel.OBSERVED, dtype=np.int8)
    labels[~known_users] = PartitionLabel.NEW_USERS
    labels[~known_items] = PartitionLabel.NEW_ITEMS
    return labels


# -- histories and batches ---------------------------------------------------

class HistoryStore:
    """Most recent counterpart ids per user and per item, oldest first."""

    def __init__(self, max_len: int = 64):
        self.max_len = max_len
        self.user_items: dict[int, deque] = {}
        self.item_users: dict[int, deque] = {}

    def user_history(self, user: int) -> list[int]:
        return list(self.user_items.get(user, ()))

    def item_history(self, item: int) -> list[int]:
        return list(self.item_users.get(item, ()))

    def extend(self, stream: InteractionStream) -> None:
        for u, x in zip(stream.users.tolist(), stream.items.tolist()):
            seq = self.user_items.get(u)
            if seq is None:
                seq = self.user_items[u] = deque(maxlen=self.max_len)
            seq.append(x)
            seq = self.item_users.get(x)
            if seq is None:
                seq = self.item_users[x] = deque(maxlen=self.max_len)
            seq.append(u)

    def clone(self) -> HistoryStore:
        other = HistoryStore(self.max_len)
        other.user_items = {k: deque(v, maxlen=self.max_len) for k, v in self.user_items.items()}
        other.item_users = {k: deque(v, maxlen=self.max_len) for k, v in self.item_users.items()}
        return other

    def sequences(self, users, items) -> SequenceBatch:
        """Rows for ``users`` (item sequences) followed by rows for ``items`` (user sequences)."""
        users, items = list(users), list(items)
        length = self.max_len
        ids = np.full((len(users) + len(items), length), PAD, dtype=np.int64)
        row = 0
        for table, keys in ((self.user_items, users), (self.item_users, items)):
            for key in keys:
                seq = table.get(key)
                if seq:
                    ids[row, : len(seq)] = seq
                row += 1
        types = np.concatenate([np.full(len(users), ITEM_TYPE), np.full(len(items), USER_TYPE)])
        return SequenceBatch(ids, ids != PAD, types)


def histories_at(store: HistoryStore, interaction: Interaction) -> tuple[list[int], list[int]]:
    """The user's item sequence and the item's user sequence held by ``store``."""
    return store.user_history(interaction.user), store.item_history(interaction.item)


def batch_stream(stream: InteractionStream, size: int = 1024) -> Iterator[InteractionStream]:
    """Consecutive chunks of at most ``size`` interactions, in stream order."""
    if size <= 0:
        raise ValueError("batch size must be positive")
    for lo in range(0, len(stream), size):
        yield stream[lo : lo + size]
