import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from felrec.encoder import ITEM_TYPE, PAD, USER_TYPE
from felrec.pipeline import (
    DataError,
    HistoryStore,
    Interaction,
    InteractionStream,
    PartitionLabel,
    SplitSpec,
    Vocabulary,
    batch_stream,
    histories_at,
    ingest,
    partition_test,
    read_prepared,
    split,
    write_canonical,
)


def stream_of(n, seed=0, users=20, items=30):
    rng = np.random.default_rng(seed)
    return InteractionStream(rng.integers(0, users, n), rng.integers(0, items, n), np.arange(n))


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestIngest:
    def test_movielens_row(self, tmp_path):
        path = write(tmp_path, "ratings.csv", "userId,movieId,rating,timestamp\n1,296,5.0,1147880044\n")
        stream, vocab = ingest(path, "movielens")
        first = stream[0]
        assert vocab.users[first.user] == "1"
        assert vocab.items[first.item] == "296"
        assert first.timestamp == 1147880044
        assert first.index == 0

    def test_rating_value_discarded(self, tmp_path):
        path = write(tmp_path, "r.csv", "userId,movieId,rating,timestamp\n1,2,0.5,10\n1,2,5.0,11\n")
        stream, _ = ingest(path, "movielens")
        assert len(stream) == 2  # every rating is one interaction, whatever its value

    def test_stable_sort_on_ties(self, tmp_path):
        path = write(tmp_path, "t.tsv", "a\tx\t5\nb\ty\t3\nc\tz\t5\nd\tw\t3\n")
        stream, vocab = ingest(path)
        assert [vocab.users[u] for u in stream.users] == ["b", "d", "a", "c"]
        np.testing.assert_array_equal(stream.timestamps, [3, 3, 5, 5])

    def test_dense_ids_by_first_appearance_in_sorted_stream(self, tmp_path):
        path = write(tmp_path, "t.tsv", "late\tx\t9\nearly\ty\t1\nlate\ty\t10\n")
        stream, vocab = ingest(path)
        assert vocab.users == ["early", "late"]
        assert vocab.items == ["y", "x"]
        np.testing.assert_array_equal(stream.users, [0, 1, 1])

    def test_twitch_ignores_watch_time(self, tmp_path):
        path = write(tmp_path, "twitch.csv", "1,33,streamerA,154,156\n2,34,streamerB,150,160\n")
        stream, vocab = ingest(path, "twitch")
        assert vocab.users == ["2", "1"]
        assert vocab.items == ["34", "33"]
        np.testing.assert_array_equal(stream.timestamps, [150, 154])

    def test_canonical_round_trip(self, tmp_path):
        path = write(tmp_path, "c.tsv", "u7\ti3\t100\n")
        stream, vocab = ingest(path)
        out = tmp_path / "back.tsv"
        write_canonical(stream, out, vocab)
        assert out.read_text(encoding="utf-8") == "u7\ti3\t100\n"

    def test_malformed_row_reports_line(self, tmp_path):
        path = write(tmp_path, "c.tsv", "u1\ti1\t1\nu2\ti2\n")
        with pytest.raises(DataError, match=":2:"):
            ingest(path)

    def test_bad_timestamp(self, tmp_path):
        path = write(tmp_path, "c.tsv", "u1\ti1\tnoon\n")
        with pytest.raises(DataError, match=":1:"):
            ingest(path)

    def test_movielens_missing_header(self, tmp_path):
        path = write(tmp_path, "r.csv", "1,296,5.0,1147880044\n")
        with pytest.raises(DataError, match="header"):
            ingest(path, "movielens")

    @pytest.mark.parametrize("fmt,text", [("canonical", ""), ("movielens", ""), ("movielens", "userId,movieId,rating,timestamp\n")])
    def test_empty_file_fails(self, tmp_path, fmt, text):
        with pytest.raises(DataError):
            ingest(write(tmp_path, "e", text), fmt)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            ingest(write(tmp_path, "c.tsv", "a\tb\t1\n"), "parquet")

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(3)
        lines = "".join(f"u{rng.integers(50)}\ti{rng.integers(80)}\t{rng.integers(20)}\n" for _ in range(500))
        path = write(tmp_path, "c.tsv", lines)
        a, va = ingest(path)
        b, vb = ingest(path)
        assert a.same_as(b) and va == vb

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 4)), min_size=1, max_size=30))
    def test_indices_are_a_sorted_permutation(self, rows):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "c.tsv"
            path.write_text("".join(f"u{u}\ti{x}\t{t}\n" for u, x, t in rows), encoding="utf-8")
            stream, vocab = ingest(path)
        assert [i.index for i in stream] == list(range(len(rows)))
        assert np.all(np.diff(stream.timestamps) >= 0)
        expected = sorted(enumerate(rows), key=lambda r: (r[1][2], r[0]))
        got = [(vocab.users[u], vocab.items[x]) for u, x in zip(stream.users, stream.items)]
        assert got == [(f"u{u}", f"i{x}") for _, (u, x, _) in expected]


class TestPreparedFiles:
    def test_read_prepared_keeps_offsets(self, tmp_path):
        stream = stream_of(12)
        write_canonical(stream[5:], tmp_path / "s.tsv")
        back = read_prepared(tmp_path / "s.tsv", start=5)
        assert back.same_as(stream[5:])

    def test_read_prepared_rejects_raw_ids(self, tmp_path):
        with pytest.raises(DataError, match=":1:"):
            read_prepared(write(tmp_path, "s.tsv", "u1\ti1\t3\n"))

    def test_vocabulary_round_trip(self, tmp_path):
        vocab = Vocabulary(["a", "b"], ["x"])
        vocab.write(tmp_path / "v.tsv")
        assert Vocabulary.read(tmp_path / "v.tsv") == vocab


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(10, (8, 1, 1)), (25, (20, 2, 3)), (100, (80, 10, 10))])
    def test_sizes(self, n, sizes):
        assert tuple(len(p) for p in split(stream_of(n))) == sizes

    def test_boundaries_for_25(self):
        train, val, test = split(stream_of(25))
        assert (val.start, test.start) == (20, 22)

    def test_degenerate(self):
        with pytest.raises(DataError):
            split(stream_of(9))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(0.8, 0.1, 0.2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 400))
    def test_concatenation_is_original(self, n):
        stream = stream_of(n, seed=n)
        parts = split(stream)
        assert InteractionStream.concat(parts).same_as(stream)
        assert len(parts[0]) == int(np.floor(0.8 * n))


class TestPartition:
    def train(self):
        return InteractionStream([0, 1], [10, 11], [0, 1])

    def test_examples(self):
        test = InteractionStream([0, 5, 0, 5], [10, 10, 99, 99], [2, 3, 4, 5])
        labels = partition_test(test, self.train())
        assert [PartitionLabel(l).title for l in labels] == ["observed", "new-users", "new-items", "new-items"]

    def test_validation_entities_do_not_count(self):
        # An item first seen during validation is still new for the test partition.
        test = InteractionStream([0], [12], [9])
        assert partition_test(test, self.train())[0] == PartitionLabel.NEW_ITEMS

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_exhaustive_and_exclusive(self, seed):
        rng = np.random.default_rng(seed)
        train = stream_of(30, seed=seed, users=10, items=10)
        test = InteractionStream(rng.integers(0, 15, 40), rng.integers(0, 15, 40), np.arange(40))
        labels = partition_test(test, train)
        known_u = np.isin(test.users, train.users)
        known_x = np.isin(test.items, train.items)
        assert set(labels.tolist()) <= {0, 1, 2}
        np.testing.assert_array_equal(labels == PartitionLabel.OBSERVED, known_u & known_x)
        np.testing.assert_array_equal(labels == PartitionLabel.NEW_ITEMS, ~known_x)
        np.testing.assert_array_equal(labels == PartitionLabel.NEW_USERS, known_x & ~known_u)


class TestHistories:
    def test_cold_start_empty(self):
        store = HistoryStore()
        assert histories_at(store, Interaction(1, 2, 0, 0)) == ([], [])

    def test_truncation_keeps_latest_64(self):
        store = HistoryStore()
        store.extend(InteractionStream(np.zeros(70), np.arange(70), np.arange(70)))
        items, _ = histories_at(store, Interaction(0, 500, 70, 70))
        assert items == list(range(6, 70))

    def test_current_interaction_excluded(self):
        stream = stream_of(300, seed=4, users=5, items=8)
        store = HistoryStore()
        for batch in batch_stream(stream, 16):
            for inter in batch:
                items, users = histories_at(store, inter)
                # Only interactions before the batch start have been applied.
                before = stream[: batch.start]
                assert items == before.items[before.users == inter.user][-64:].tolist()
                assert users == before.users[before.items == inter.item][-64:].tolist()
            store.extend(batch)

    def test_duplicates_in_batch_latest_last(self):
        store = HistoryStore(max_len=3)
        store.extend(InteractionStream([1, 1, 1, 1], [4, 5, 6, 7], [0, 0, 0, 0]))
        assert store.user_history(1) == [5, 6, 7]

    def test_sequences_layout(self):
        store = HistoryStore(max_len=4)
        store.extend(InteractionStream([1, 1, 2], [7, 8, 7], [0, 1, 2]))
        seqs = store.sequences([1, 3], [7])
        np.testing.assert_array_equal(seqs.ids[0], [7, 8, PAD, PAD])
        assert not seqs.mask[1].any()
        np.testing.assert_array_equal(seqs.ids[2, :2], [1, 2])
        np.testing.assert_array_equal(seqs.element_types, [ITEM_TYPE, ITEM_TYPE, USER_TYPE])

    def test_clone_independent(self):
        store = HistoryStore()
        store.extend(InteractionStream([0], [1], [0]))
        other = store.clone()
        other.extend(InteractionStream([0], [2], [1]))
        assert store.user_history(0) == [1]


class TestBatches:
    def test_sizes_2500(self):
        assert [len(b) for b in batch_stream(stream_of(2500))] == [1024, 1024, 452]

    def test_concatenation_and_order(self):
        stream = stream_of(2500)
        batches = list(batch_stream(stream))
        assert InteractionStream.concat(batches).same_as(stream)
        stamps = np.concatenate([b.timestamps for b in batches])
        assert np.all(np.diff(stamps) >= 0)
        assert [b.start for b in batches] == [0, 1024, 2048]

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            list(batch_stream(stream_of(10), 0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 300), st.integers(1, 64))
    def test_chunking(self, n, size):
        sizes = [len(b) for b in batch_stream(stream_of(n), size)]
        assert sum(sizes) == n
        assert all(s == size for s in sizes[:-1])
        assert not sizes or 0 < sizes[-1] <= size
