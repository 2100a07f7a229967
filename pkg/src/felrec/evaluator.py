"""Streaming evaluation over a growing item catalog.

Every test interaction is scored with the representations cached before its
batch; afterwards the batch is absorbed into the histories and fresh user and
item representations are written to the cache.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from felrec.cache import ITEM, USER, RepresentationCache
from felrec.encoder import Encoder
from felrec.numerics.tensor import no_grad
from felrec.pipeline import HistoryStore, InteractionStream, PartitionLabel, batch_stream

MODES = ("continue", "reset", "zero-shot")
BUCKET_EDGES = (0, 1, 4, 16, 64, 256, 1024)
BUCKET_NAMES = ("0", "1-3", "4-15", "16-63", "64-255", "256-1023", ">=1024")


class Catalog:
    """Items eligible for recommendation, in order of entry; never shrinks."""

    def __init__(self, items=()):
        self.ids: list[int] = []
        self.position: dict[int, int] = {}
        self.add_many(items)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item) -> bool:
        return int(item) in self.position

    def add(self, item: int) -> int:
        item = int(item)
        pos = self.position.get(item)
        if pos is None:
            pos = self.position[item] = len(self.ids)
            self.ids.append(item)
        return pos

    def add_many(self, items) -> None:
        for item in np.asarray(items, dtype=np.int64).tolist():
            self.add(item)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def copy(self) -> Catalog:
        other = Catalog()
        other.ids = list(self.ids)
        other.position = dict(self.position)
        return other


@dataclass
class StreamState:
    """Everything the evaluator carries from one interaction to the next."""

    cache: RepresentationCache
    histories: HistoryStore
    catalog: Catalog = field(default_factory=Catalog)
    item_counts: Counter = field(default_factory=Counter)

    @classmethod
    def empty(cls, dim: int, max_len: int = 64) -> StreamState:
        return cls(RepresentationCache(dim), HistoryStore(max_len))

    @classmethod
    def from_log(cls, cache: RepresentationCache, log: InteractionStream, max_len: int = 64) -> StreamState:
        """State after ``log`` has been observed, paired with the given cache."""
        histories = HistoryStore(max_len)
        histories.extend(log)
        return cls(cache, histories, Catalog(log.items), Counter(log.items.tolist()))

    def clone(self) -> StreamState:
        return StreamState(self.cache.clone(), self.histories.clone(), self.catalog.copy(), Counter(self.item_counts))


# -- scoring primitives ----------------------------------------------------

def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def score(user_vector, item_vectors) -> np.ndarray:
    """Cosine similarity of one user vector against each item row; zero vectors score 0."""
    return _unit_rows(np.atleast_2d(item_vectors)) @ _unit_rows(np.asarray(user_vector))


def normalized_rank(scores, ground_truth: int) -> float:
    """(items strictly better + half the ties with other items) / catalog size."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("normalized_rank: empty catalog")
    target = scores[ground_truth]
    greater = np.count_nonzero(scores > target)
    ties = np.count_nonzero(scores == target) - 1
    return (greater + 0.5 * ties) / scores.size


def sample_negatives(catalog_size: int, ground_truth: int, rng: np.random.Generator, n: int = 100) -> np.ndarray:
    """Indices of ``n`` catalog items other than the ground truth.

    Sampling is without replacement when at least ``n`` other items exist and
    with replacement otherwise.
    """
    others = catalog_size - 1
    if others <= 0:
        return np.empty(0, dtype=np.intp)
    idx = rng.choice(others, size=n, replace=others < n)
    return idx + (idx >= ground_truth)


def hit_rate_at_10(scores, ground_truth: int, rng: np.random.Generator, negatives: int = 100, k: int = 10) -> bool:
    """Whether the ground truth lands in the top ``k`` of itself plus sampled negatives.

    Ties count against the ground truth.
    """
    scores = np.asarray(scores)
    neg = sample_negatives(len(scores), ground_truth, rng, negatives)
    return int(np.count_nonzero(scores[neg] >= scores[ground_truth])) < k


def nn_recommend(user: int, cache: RepresentationCache, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Average the item scores of the ``k`` users most similar to ``user``.

    Returns ``(item ids, averaged cosine scores)`` over every cached item.
    """
    if (USER, user) not in cache:
        raise KeyError(f"user {user} has no cached representation")
    item_ids, item_vecs = cache.matrix(ITEM)
    proxy = _neighbor_proxies(cache.get(USER, user)[None, :], np.array([user]), cache, k)[0]
    return item_ids, _unit_rows(item_vecs) @ proxy


def _neighbor_proxies(user_vecs: np.ndarray, user_ids: np.ndarray, cache: RepresentationCache, k: int) -> np.ndarray:
    """Mean of the unit vectors of each row's ``k`` nearest cached users (self excluded).

    Dotting this mean with unit item vectors equals averaging the neighbors'
    cosine score lists.
    """
    table_ids, table_vecs = cache.matrix(USER)
    table_unit = _unit_rows(table_vecs)
    sims = _unit_rows(user_vecs) @ table_unit.T
    sims[table_ids[None, :] == np.asarray(user_ids)[:, None]] = -np.inf
    available = np.isfinite(sims).sum(axis=1)
    kk = min(k, table_unit.shape[0])
    if kk == 0:
        return np.zeros((len(user_vecs), cache.dim))
    top = np.argpartition(-sims, kk - 1, axis=1)[:, :kk]
    chosen = np.take_along_axis(sims, top, axis=1)
    weights = np.isfinite(chosen).astype(np.float64)
    proxies = np.einsum("bk,bkd->bd", weights, table_unit[top]) / np.maximum(weights.sum(1, keepdims=True), 1)
    proxies[available == 0] = 0
    return proxies


# -- reports -----------------------------------------------------------------

@dataclass
class EvalRecords:
    """Per-interaction outcomes in stream order."""

    index: np.ndarray
    label: np.ndarray
    rank: np.ndarray
    hit: np.ndarray
    popularity: np.ndarray
    catalog_size: np.ndarray

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stream_index", "partition", "rank", "hit", "item_prior_count", "catalog_size"])
            for i, lab, r, h, p, c in zip(self.index, self.label, self.rank, self.hit, self.popularity, self.catalog_size):
                w.writerow([int(i), PartitionLabel(int(lab)).title, f"{r:.6f}", int(h), int(p), int(c)])


@dataclass
class PartitionMetrics:
    count: int
    rank: float
    hr10: float


@dataclass
class EvalReport:
    partitions: dict[str, PartitionMetrics]
    total: PartitionMetrics

    @classmethod
    def from_records(cls, records: EvalRecords) -> EvalReport:
        parts = {}
        for label in PartitionLabel:
            sel = records.label == label
            parts[label.title] = _metrics(records.rank[sel], records.hit[sel])
        return cls(parts, _metrics(records.rank, records.hit))

    def rows(self):
        for name, m in list(self.partitions.items()) + [("total", self.total)]:
            yield name, m

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["partition", "count", "share", "rank", "hr@10"])
            for name, m in self.rows():
                share = m.count / self.total.count if self.total.count else 0.0
                w.writerow([name, m.count, f"{share:.4f}", f"{m.rank:.6f}", f"{m.hr10:.6f}"])

    def to_text(self) -> str:
        lines = [f"{'partition':<10} {'count':>8} {'share':>7} {'rank':>7} {'hr@10':>7}"]
        for name, m in self.rows():
            share = 100 * m.count / self.total.count if self.total.count else 0.0
            lines.append(f"{name:<10} {m.count:>8d} {share:>6.2f}% {m.rank:>7.3f} {100 * m.hr10:>6.2f}%")
        return "\n".join(lines)


def _metrics(rank: np.ndarray, hit: np.ndarray) -> PartitionMetrics:
    if len(rank) == 0:
        return PartitionMetrics(0, float("nan"), float("nan"))
    return PartitionMetrics(len(rank), float(rank.mean()), float(hit.mean()))


@dataclass
class PopularityCurve:
    """Mean rank per bucket of the ground-truth item's prior interaction count."""

    series: dict[str, list[tuple[int, float]]]  # name -> [(count, mean rank)] per bucket

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "bucket", "count", "mean_rank"])
            for name, buckets in self.series.items():
                for bucket, (n, r) in zip(BUCKET_NAMES, buckets):
                    w.writerow([name, bucket, n, "" if n == 0 else f"{r:.6f}"])

    def to_text(self) -> str:
        lines = [f"{'bucket':<10}" + "".join(f"{name:>16}" for name in self.series)]
        for b, bucket in enumerate(BUCKET_NAMES):
            cells = []
            for buckets in self.series.values():
                n, r = buckets[b]
                cells.append(f"{'-':>16}" if n == 0 else f"{r:>9.3f} ({n:>4d})")
            lines.append(f"{bucket:<10}" + "".join(cells))
        return "\n".join(lines)


def bucket_of(count) -> np.ndarray:
    """Bucket index for prior-interaction counts: 0, 1-3, 4-15, ..., >=1024."""
    return np.searchsorted(BUCKET_EDGES, np.asarray(count), side="right") - 1


def popularity_curve(records: EvalRecords) -> PopularityCurve:
    buckets = bucket_of(records.popularity)
    new_items = records.label == PartitionLabel.NEW_ITEMS
    series = {}
    for name, sel in (("I", new_items), ("O+U", ~new_items), ("all", np.ones_like(new_items))):
        rows = []
        for b in range(len(BUCKET_NAMES)):
            ranks = records.rank[sel & (buckets == b)]
            rows.append((len(ranks), float(ranks.mean()) if len(ranks) else float("nan")))
        series[name] = rows
    return PopularityCurve(series)


@dataclass
class EvalResult:
    report: EvalReport
    curve: PopularityCurve
    records: EvalRecords


# -- the streaming loop -------------------------------------------------------

def refresh(batch: InteractionStream, encoder: Encoder, state: StreamState) -> None:
    """Absorb ``batch`` and re-encode its users and items from the updated histories."""
    state.histories.extend(batch)
    state.catalog.add_many(batch.items)
    state.item_counts.update(batch.items.tolist())
    users = list(dict.fromkeys(batch.users.tolist()))
    items = list(dict.fromkeys(batch.items.tolist()))
    encoder.eval()
    with no_grad():
        reps = encoder(state.histories.sequences(users, items), state.cache).data
    state.cache.put_many(USER, users, reps[: len(users)])
    state.cache.put_many(ITEM, items, reps[len(users):])


def absorb(stream: InteractionStream, encoder: Encoder, state: StreamState, batch_size: int = 1024) -> None:
    """Stream interactions through the cache without scoring them."""
    for batch in batch_stream(stream, batch_size):
        refresh(batch, encoder, state)


def evaluate_stream(
    test: InteractionStream,
    labels: np.ndarray | None,
    encoder: Encoder,
    state: StreamState,
    *,
    batch_size: int = 1024,
    rng: np.random.Generator | None = None,
    nn_k: int | None = None,
    compute_hr: bool = True,
    scorer=None,
) -> EvalResult:
    """Score every interaction of ``test`` in order, then update ``state`` with it.

    ``scorer``, if given, replaces cosine scoring: it receives the batch and
    the catalog ids and returns a (batch, catalog) score matrix.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.zeros(len(test), dtype=np.int8) if labels is None else np.asarray(labels)
    out_rank = np.empty(len(test))
    out_hit = np.zeros(len(test), dtype=bool)
    out_pop = np.empty(len(test), dtype=np.int64)
    out_size = np.empty(len(test), dtype=np.int64)
    offset = 0
    for batch in batch_stream(test, batch_size):
        n = len(batch)
        gt = np.empty(n, dtype=np.intp)
        sizes = np.empty(n, dtype=np.intp)
        counts = state.item_counts
        pending: Counter = Counter()
        catalog = state.catalog
        for j, item in enumerate(batch.items.tolist()):
            gt[j] = catalog.add(item)
            sizes[j] = len(catalog)
            out_pop[offset + j] = counts[item] + pending[item]
            pending[item] += 1
        ids = catalog.array()
        if scorer is not None:
            scores = np.asarray(scorer(batch, ids), dtype=np.float64)
        else:
            scores = _cosine_scores(batch, ids, state.cache, nn_k)
        cols = np.arange(len(ids))
        valid = cols[None, :] < sizes[:, None]
        target = scores[np.arange(n), gt][:, None]
        greater = np.count_nonzero((scores > target) & valid, axis=1)
        ties = np.count_nonzero((scores == target) & valid, axis=1) - 1
        out_rank[offset : offset + n] = (greater + 0.5 * ties) / sizes
        if compute_hr:
            for j in range(n):
                neg = sample_negatives(int(sizes[j]), int(gt[j]), rng)
                out_hit[offset + j] = np.count_nonzero(scores[j, neg] >= scores[j, gt[j]]) < 10
        out_size[offset : offset + n] = sizes
        refresh(batch, encoder, state)
        offset += n
    records = EvalRecords(test.indices, labels, out_rank, out_hit, out_pop, out_size)
    return EvalResult(EvalReport.from_records(records), popularity_curve(records), records)


def _cosine_scores(batch: InteractionStream, catalog_ids: np.ndarray, cache: RepresentationCache, nn_k) -> np.ndarray:
    items = _unit_rows(cache.gather(ITEM, catalog_ids))
    users = cache.gather(USER, batch.users)
    if nn_k:
        proxies = _neighbor_proxies(users, batch.users, cache, nn_k)
        has_vec = np.linalg.norm(users, axis=1) > 0
        queries = np.where(has_vec[:, None], proxies, 0.0)
    else:
        queries = _unit_rows(users)
    return queries @ items.T


def initial_state(
    mode: str,
    cache: RepresentationCache,
    train: InteractionStream,
    max_len: int = 64,
) -> StreamState:
    """Evaluator state at the end of the training period for the given mode.

    ``continue`` keeps the trained cache; ``reset`` and ``zero-shot`` start
    from an empty cache. Histories, catalog and item counts always come from
    the evaluated dataset's training log.
    """
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {', '.join(MODES)}")
    start_cache = cache.clone() if mode == "continue" else RepresentationCache(cache.dim)
    return StreamState.from_log(start_cache, train, max_len)


def evaluate(
    encoder: Encoder,
    cache: RepresentationCache,
    train: InteractionStream,
    validation: InteractionStream,
    test: InteractionStream,
    labels: np.ndarray,
    mode: str = "continue",
    *,
    max_len: int = 64,
    batch_size: int = 1024,
    seed: int = 0,
    nn_k: int | None = None,
) -> EvalResult:
    """Full test protocol: stream the validation split unscored, then score the test split."""
    state = initial_state(mode, cache, train, max_len)
    absorb(validation, encoder, state, batch_size)
    return evaluate_stream(
        test, labels, encoder, state, batch_size=batch_size, rng=np.random.default_rng(seed), nn_k=nn_k
    )
