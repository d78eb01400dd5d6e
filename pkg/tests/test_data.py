"""Ingestion, k-core fixpoint, user splits, batching, serialization."""

import numpy as np
import pytest

from adrec.data import (
    InteractionDataset,
    RawInteraction,
    dataset_hash,
    filter_min_rating,
    format_stats_block,
    ingest,
    iter_batches,
    k_core_filter,
    load_dataset,
    pack_rows,
    save_dataset,
    split_users,
)
from adrec.errors import DataError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def interactions(*triples):
    return [RawInteraction(u, i, ts) for u, i, ts in triples]


def dense_world(n_users=6, n_items=6):
    """Every user interacts with every item: already a k-core for k <= min(n)."""
    rows = []
    t = 0
    for u in range(n_users):
        for i in range(n_items):
            rows.append(RawInteraction(f"u{u}", f"i{i}", t))
            t += 1
    return rows


class TestIngest:
    def test_three_line_tsv(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u1\ti1\t100\nu2\ti2\t200\nu1\ti2\t300\n")
        rows = ingest(p)
        assert len(rows) == 3
        assert rows[0] == RawInteraction("u1", "i1", 100)

    def test_csv_with_header(self, tmp_path):
        p = write(tmp_path, "a.csv", "user,item,timestamp\nu1,i1,100\nu2,i2,200\n")
        rows = ingest(p)
        assert len(rows) == 2

    def test_four_column_movielens_layout(self, tmp_path):
        p = write(tmp_path, "u.data", "196\t242\t3\t881250949\n186\t302\t3\t891717742\n")
        rows = ingest(p)
        assert rows[0].rating == 3.0 and rows[0].timestamp == 881250949

    def test_non_integer_timestamp_names_line(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u1\ti1\t100\nu2\ti2\tnot_a_ts\n")
        with pytest.raises(DataError, match="a.tsv:2"):
            ingest(p)

    def test_empty_file(self, tmp_path):
        p = write(tmp_path, "a.tsv", "")
        with pytest.raises(DataError, match="empty"):
            ingest(p)

    def test_header_only_file(self, tmp_path):
        p = write(tmp_path, "a.tsv", "user\titem\ttimestamp\n")
        with pytest.raises(DataError, match="no interactions"):
            ingest(p)

    def test_wrong_column_count(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u1\ti1\t100\nu2\ti2\n")
        with pytest.raises(DataError, match="a.tsv:2"):
            ingest(p)


def test_min_rating_filter():
    rows = [RawInteraction("u", "i", 1, r) for r in (1.0, 3.0, 4.0, 5.0)]
    assert len(filter_min_rating(rows, 4.0)) == 2
    with pytest.raises(DataError, match="no rating"):
        filter_min_rating(interactions(("u", "i", 1)), 4.0)


class TestKCore:
    def test_already_dense_world_unchanged(self):
        ds = k_core_filter(dense_world(6, 6), k=5)
        assert ds.stats["users"] == 6 and ds.stats["items"] == 6
        assert ds.stats["interactions"] == 36

    def test_weak_user_removed_then_items_rechecked(self):
        rows = dense_world(6, 6)
        # one extra user with 4 interactions on otherwise-dense items
        rows += interactions(("weak", "i0", 900), ("weak", "i1", 901),
                             ("weak", "i2", 902), ("weak", "i3", 903))
        ds = k_core_filter(rows, k=5)
        assert "weak" not in ds.users
        assert ds.stats == k_core_filter(dense_world(6, 6), k=5).stats

    def test_fixpoint_matches_brute_force_iterative_oracle(self):
        rng = np.random.default_rng(4)
        rows = [
            RawInteraction(f"u{rng.integers(0, 12)}", f"i{rng.integers(0, 12)}", int(t))
            for t in range(220)
        ]
        ds = k_core_filter(rows, k=5)

        # brute force: repeatedly drop ONE offending user or item at a time,
        # in a different order than the implementation
        alive = list(rows)
        while True:
            from collections import Counter

            u = Counter(r.user for r in alive)
            i = Counter(r.item for r in alive)
            bad_items = sorted(name for name, c in i.items() if c < 5)
            bad_users = sorted(name for name, c in u.items() if c < 5)
            if bad_items:
                alive = [r for r in alive if r.item != bad_items[0]]
            elif bad_users:
                alive = [r for r in alive if r.user != bad_users[0]]
            else:
                break
        assert ds.stats["interactions"] == len(alive)
        assert set(ds.users) == {r.user for r in alive}

    def test_min_degrees_after_filter(self):
        rng = np.random.default_rng(5)
        rows = [
            RawInteraction(f"u{rng.integers(0, 15)}", f"i{rng.integers(0, 15)}", int(t))
            for t in range(400)
        ]
        ds = k_core_filter(rows, k=5)
        from collections import Counter

        item_deg = Counter()
        for seq in ds.user_sequences:
            item_deg.update(seq)
        assert min(len(s) for s in ds.user_sequences) >= 5
        assert min(item_deg.values()) >= 5

    def test_everything_filtered(self):
        with pytest.raises(DataError, match="removed the whole dataset"):
            k_core_filter(interactions(("u", "i", 1)), k=5)

    def test_sequences_chronological_with_file_order_ties(self):
        rows = [
            RawInteraction("u", "a", 10), RawInteraction("u", "b", 5),
            RawInteraction("u", "c", 10), RawInteraction("u", "d", 1),
            RawInteraction("u", "e", 10),
        ]
        ds = k_core_filter(rows, k=1)
        raw = {v: k for k, v in ds.item_vocab.items()}
        assert [raw[i] for i in ds.user_sequences[0]] == ["d", "b", "a", "c", "e"]

    def test_truncation_keeps_most_recent(self):
        rows = [RawInteraction("u", f"i{t}", t) for t in range(60)]
        ds = k_core_filter(rows, k=1, max_len=50)
        assert len(ds.user_sequences[0]) == 50
        raw = {v: k for k, v in ds.item_vocab.items()}
        assert raw[ds.user_sequences[0][0]] == "i10"
        assert raw[ds.user_sequences[0][-1]] == "i59"
        assert ds.stats["interactions"] == 60  # stats count pre-truncation

    def test_vocab_dense_from_one(self):
        ds = k_core_filter(dense_world(5, 7), k=5)
        assert sorted(ds.item_vocab.values()) == list(range(1, 8))


class TestSplit:
    def test_ten_users_split_8_1_1(self):
        ds = k_core_filter(dense_world(10, 6), k=5)
        split_users(ds, seed=3)
        counts = np.bincount(ds.split, minlength=3)
        assert counts.tolist() == [8, 1, 1]

    def test_938_users_split_750_94_94(self):
        # floored cumulative boundaries at the catalog scale used throughout
        n = 938
        ds = InteractionDataset({"x": 1}, [f"u{i}" for i in range(n)],
                                [[1, 1] for _ in range(n)], 50, {})
        split_users(ds, seed=0)
        counts = np.bincount(ds.split, minlength=3)
        assert counts.tolist() == [750, 94, 94]

    def test_same_seed_identical_assignment(self):
        a = split_users(k_core_filter(dense_world(10, 6), k=5), seed=11).split.copy()
        b = split_users(k_core_filter(dense_world(10, 6), k=5), seed=11).split.copy()
        assert np.array_equal(a, b)

    def test_too_few_users(self):
        ds = k_core_filter(dense_world(2, 8), k=2)
        with pytest.raises(DataError, match="at least 3"):
            split_users(ds)


class TestBatches:
    def make_ds(self, seqs, max_len=6):
        ds = InteractionDataset(
            {f"i{k}": k for k in range(1, 1 + max(max(s) for s in seqs))},
            [f"u{j}" for j in range(len(seqs))],
            [list(s) for s in seqs], max_len, {},
            split=np.zeros(len(seqs), dtype=np.uint8),
        )
        return ds

    def test_shift_and_left_padding(self):
        ds = self.make_ds([[1, 2, 3]])
        batch = next(iter_batches(ds, "train", batch_size=4))
        assert batch.history_ids.tolist() == [[0, 0, 0, 0, 1, 2]]
        assert batch.target_ids.tolist() == [[0, 0, 0, 0, 2, 3]]
        assert batch.pad_mask.tolist() == [[0, 0, 0, 0, 1, 1]]

    def test_alignment_invariant(self, rng):
        seqs = [list(rng.integers(1, 9, size=n) + 0) for n in (3, 5, 6)]
        ds = self.make_ds([list(map(int, s)) for s in seqs])
        batch = next(iter_batches(ds, "train", batch_size=8))
        h, t, m = batch.history_ids, batch.target_ids, batch.pad_mask
        for b in range(h.shape[0]):
            for k in range(h.shape[1] - 1):
                if m[b, k] and m[b, k + 1]:
                    assert t[b, k] == h[b, k + 1]
        assert np.all((h[m == 0] == 0) & (t[m == 0] == 0))

    def test_token_target_count_oracle(self, rng):
        max_len = 6
        lengths = [2, 3, 6, 6, 4, 5, 6]
        seqs = [list(map(int, rng.integers(1, 9, size=n))) for n in lengths]
        ds = self.make_ds(seqs, max_len=max_len)
        total = sum(int(b.pad_mask.sum()) for b in iter_batches(ds, "train", batch_size=3))
        assert total == sum(min(n, max_len) - 1 for n in lengths)

    def test_short_sequences_skipped_with_warning(self, caplog):
        ds = self.make_ds([[1, 2, 3], [4]])
        with caplog.at_level("WARNING"):
            batches = list(iter_batches(ds, "train", batch_size=4))
        assert sum(b.batch_size for b in batches) == 1
        assert "skipped 1" in caplog.text

    def test_eval_target_sits_in_last_valid_column(self):
        ds = self.make_ds([[1, 2, 3, 4]])
        ds.split[:] = 2
        batch = next(iter_batches(ds, "test", batch_size=4))
        # history excludes the final item; its target column carries it
        assert batch.history_ids[0, -1] == 3
        assert batch.target_ids[0, -1] == 4

    def test_train_shuffle_is_seeded(self):
        ds = self.make_ds([[1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7]])
        order1 = [b.user_rows.tolist() for b in iter_batches(ds, "train", 2, shuffle_seed=5)]
        order2 = [b.user_rows.tolist() for b in iter_batches(ds, "train", 2, shuffle_seed=5)]
        order3 = [b.user_rows.tolist() for b in iter_batches(ds, "train", 2, shuffle_seed=6)]
        assert order1 == order2
        assert order1 != order3


class TestSerialization:
    def build(self, seed=7):
        rng = np.random.default_rng(99)
        rows = [
            RawInteraction(f"u{rng.integers(0, 12)}", f"i{rng.integers(0, 10)}", int(t))
            for t in range(300)
        ]
        ds = k_core_filter(rows, k=5, max_len=8)
        return split_users(ds, seed=seed)

    def test_round_trip(self, tmp_path):
        ds = self.build()
        save_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert loaded.item_vocab == ds.item_vocab
        assert loaded.users == ds.users
        assert loaded.user_sequences == ds.user_sequences
        assert np.array_equal(loaded.split, ds.split)
        assert loaded.max_len == ds.max_len

    def test_byte_identical_across_runs(self, tmp_path):
        save_dataset(self.build(), tmp_path / "a")
        save_dataset(self.build(), tmp_path / "b")
        for name in ("manifest.json", "items.tsv", "users.tsv", "seq_lengths.bin", "seq_items.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")

    def test_corruption_detected(self, tmp_path):
        ds = self.build()
        save_dataset(ds, tmp_path / "d")
        payload = (tmp_path / "d" / "seq_items.bin").read_bytes()
        (tmp_path / "d" / "seq_items.bin").write_bytes(payload[:-4] + b"\x09\x00\x00\x00")
        with pytest.raises(DataError, match="hash mismatch"):
            load_dataset(tmp_path / "d")

    def test_unsplit_dataset_rejected(self, tmp_path):
        ds = self.build()
        ds.split = None
        with pytest.raises(DataError, match="unsplit"):
            save_dataset(ds, tmp_path / "d")


def test_stats_block_format():
    block = format_stats_block({
        "users": 938, "items": 1008, "interactions": 54457,
        "avg_length": 58.06, "sparsity": 0.9424,
    })
    assert "Users        938" in block
    assert "Items        1008" in block
    assert "Interactions 54457" in block
