import numpy as np
import pytest

from fedrec_lab.data import (
    FORMAT_PRESETS,
    ClientDataset,
    DatasetFormat,
    interaction_buckets,
    leave_one_out_split,
    load_dataset,
    parse_ratio,
    positive_fraction,
    sample_negatives,
    subsample_users,
    write_synthetic_dataset,
)
from fedrec_lab.numerics import RngStream


@pytest.fixture
def tiny_file(tmp_path):
    # 3 users x enough interactions for leave-one-out, tab separated
    rows = [
        ("1", "10", 5, 100), ("1", "11", 3, 200), ("1", "12", 4, 300),
        ("1", "13", 1, 400),
        ("2", "10", 2, 150), ("2", "14", 5, 50), ("2", "11", 4, 250),
        ("3", "12", 3, 500), ("3", "13", 4, 600), ("3", "10", 5, 700),
    ]
    path = tmp_path / "u.data"
    path.write_text("".join(f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in rows))
    return path


def split_of(path, seed=3):
    inter, cat, dups = load_dataset(path, FORMAT_PRESETS["ml-100k"])
    return leave_one_out_split(inter, cat, RngStream(seed, "split"), dups)


class TestLoadDataset:
    def test_hand_fixture_exact_triples(self, tiny_file):
        inter, cat, dups = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        assert len(inter) == 10 and dups == 0
        assert cat.n_users == 3 and cat.n_items == 5
        # dense ids assigned in first-seen order
        assert cat.user_keys == ["1", "2", "3"]
        assert cat.item_keys == ["10", "11", "12", "13", "14"]
        first = inter[0]
        assert (first.user, first.item, first.label, first.timestamp) == (0, 0, 1, 100)

    def test_all_labels_binarized_to_one(self, tiny_file):
        inter, _, _ = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        assert all(it.label == 1 for it in inter)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.data"
        path.write_text("")
        inter, cat, _ = load_dataset(path, FORMAT_PRESETS["ml-100k"])
        assert inter == [] and cat.n_users == 0 and cat.n_items == 0

    def test_unparseable_row_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.data"
        path.write_text("1\t10\t5\t100\nnot-enough-columns\n")
        with pytest.raises(ValueError, match="line 2"):
            load_dataset(path, FORMAT_PRESETS["ml-100k"])

    def test_duplicates_dropped_and_counted(self, tmp_path):
        path = tmp_path / "dup.data"
        path.write_text("1\t10\t5\t100\n1\t10\t2\t900\n1\t11\t3\t200\n")
        inter, _, dups = load_dataset(path, FORMAT_PRESETS["ml-100k"])
        assert dups == 1 and len(inter) == 2
        assert inter[0].timestamp == 100  # first occurrence wins

    def test_missing_timestamp_uses_file_order(self, tmp_path):
        path = tmp_path / "nots.csv"
        path.write_text("user,item,rating\na,x,1\na,y,1\n")
        fmt = DatasetFormat(",", True, 0, 1, 2, None)
        inter, _, _ = load_dataset(path, fmt)
        assert [it.timestamp for it in inter] == [0, 1]

    def test_reingest_identical_catalog(self, tiny_file):
        _, cat1, _ = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        _, cat2, _ = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        assert cat1.user_keys == cat2.user_keys
        assert cat1.item_keys == cat2.item_keys
        assert np.array_equal(cat1.item_popularity, cat2.item_popularity)

    def test_popularity_sums_to_interactions(self, tiny_file):
        inter, cat, _ = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        assert cat.item_popularity.sum() == len(inter)


class TestLeaveOneOut:
    def test_three_interactions_forced_assignment(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("1\t10\t1\t100\n1\t11\t1\t300\n1\t12\t1\t200\n")
        split = split_of(path)
        c = split.clients[0]
        assert c.test_item == 1      # item "11", latest
        assert c.val_item == 2       # item "12", second latest
        assert c.positives.tolist() == [0]

    def test_user_with_two_interactions_excluded(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("1\t10\t1\t100\n1\t11\t1\t300\n"
                        "2\t10\t1\t100\n2\t11\t1\t200\n2\t12\t1\t300\n")
        split = split_of(path)
        assert 0 in split.report.excluded_users
        assert list(split.clients) == [1]
        assert split.report.retained_users == 1

    def test_recency_sort_oracle(self, tmp_path):
        # 10 users with unique timestamps: split must equal brute-force sort
        rng = RngStream(77, "gen")
        lines = []
        expect = {}
        for u in range(10):
            n = 3 + int(rng.uniforms(1)[0] * 6)
            ts = (1000 * u + np.sort(rng.sample(900, n))).tolist()
            items = rng.sample(50, n).tolist()
            for i, t in zip(items, ts):
                lines.append(f"{u}\t{i}\t1\t{t}\n")
            expect[u] = (items[-1], items[-2], sorted(items[:-2]))
        path = tmp_path / "u.data"
        path.write_text("".join(lines))
        inter, cat, _ = load_dataset(path, FORMAT_PRESETS["ml-100k"])
        split = leave_one_out_split(inter, cat, RngStream(1, "split"))
        for uid, client in split.clients.items():
            raw_test, raw_val, raw_train = expect[int(cat.user_keys[uid])]
            assert cat.item_keys[client.test_item] == str(raw_test)
            assert cat.item_keys[client.val_item] == str(raw_val)
            got_train = sorted(int(cat.item_keys[i]) for i in client.positives)
            assert got_train == raw_train

    def test_tie_break_deterministic(self, tmp_path):
        path = tmp_path / "u.data"
        # all timestamps equal: rng decides, but identically across calls
        path.write_text("".join(f"1\t{i}\t1\t100\n" for i in range(5)))
        a = split_of(path, seed=9).clients[0]
        b = split_of(path, seed=9).clients[0]
        assert a.test_item == b.test_item and a.val_item == b.val_item

    def test_holdouts_disjoint_from_training(self, tiny_file):
        split = split_of(tiny_file)
        for c in split.clients.values():
            assert c.test_item not in c.positives
            assert c.val_item not in c.positives
            assert c.test_item != c.val_item

    def test_interaction_accounting(self, tiny_file):
        # sum of training positives + 2 per retained user = retained interactions
        inter, cat, dups = load_dataset(tiny_file, FORMAT_PRESETS["ml-100k"])
        split = leave_one_out_split(inter, cat, RngStream(3, "split"), dups)
        total = sum(len(c.positives) for c in split.clients.values())
        retained = [it for it in inter if it.user in split.clients]
        assert total + 2 * split.report.retained_users == len(retained)


class TestSampleNegatives:
    def _client(self):
        return ClientDataset(user=0, positives=np.array([1, 2, 3]),
                             val_item=4, test_item=5)

    def _catalog(self, n_items=40):
        inter, cat, _ = None, None, None
        from fedrec_lab.data import Catalog
        return Catalog(n_users=1, n_items=n_items, user_keys=["0"],
                       item_keys=[str(i) for i in range(n_items)],
                       user_index={"0": 0},
                       item_index={str(i): i for i in range(n_items)},
                       item_popularity=np.ones(n_items, dtype=np.int64))

    def test_ratio_forces_count(self):
        client = self._client()
        sample_negatives(client, self._catalog(), "1:4", RngStream(1, "n"))
        assert len(client.negatives) == 12

    def test_negatives_never_collide(self):
        client = self._client()
        rng = RngStream(2, "n")
        blocked = {1, 2, 3, 4, 5}
        for _ in range(1000):
            negs = sample_negatives(client, self._catalog(), "1:4", rng)
            assert not (set(negs.tolist()) & blocked)
            assert len(set(negs.tolist())) == len(negs)

    def test_insufficient_candidates_names_user(self):
        client = self._client()
        with pytest.raises(ValueError, match="user 0"):
            sample_negatives(client, self._catalog(n_items=10), "1:4",
                             RngStream(1, "n"))

    def test_uniform_inclusion_frequency(self):
        # Monte Carlo: every candidate equally likely over many resamples
        client = self._client()
        cat = self._catalog(25)
        rng = RngStream(5, "mc")
        candidates = [i for i in range(25) if i not in {1, 2, 3, 4, 5}]
        counts = {i: 0 for i in candidates}
        trials = 10_000
        for _ in range(trials):
            for i in sample_negatives(client, cat, "1:4", rng):
                counts[int(i)] += 1
        p = 12 / len(candidates)
        sigma = np.sqrt(trials * p * (1 - p))
        for i, c in counts.items():
            assert abs(c - trials * p) < 3.5 * sigma, (i, c)

    def test_ratio_parsing(self):
        assert parse_ratio("1:4") == (1, 4)
        assert positive_fraction("1:4") == pytest.approx(0.2)
        assert positive_fraction("2:3") == pytest.approx(0.4)
        with pytest.raises(ValueError):
            parse_ratio("nonsense")
        with pytest.raises(ValueError):
            parse_ratio("0:4")


class TestInteractionBuckets:
    def test_single_bucket(self, tiny_file):
        split = split_of(tiny_file)
        buckets = interaction_buckets(split, n=1)
        assert set(buckets.values()) == {0}

    def test_forced_two_per_bucket(self, tmp_path):
        lines = []
        for u in range(40):
            for i in range(3 + u):  # distinct interaction counts
                lines.append(f"{u}\t{i}\t1\t{i}\n")
        path = tmp_path / "u.data"
        path.write_text("".join(lines))
        split = split_of(path)
        buckets = interaction_buckets(split, n=20)
        sizes = np.bincount(list(buckets.values()), minlength=20)
        assert sizes.tolist() == [2] * 20
        # ordered by interaction count: user u has 3+u interactions
        assert buckets[0] == 0 and buckets[39] == 19

    def test_matches_sort_and_chunk_oracle(self, tmp_path):
        rng = RngStream(13, "bk")
        lines = []
        for u in range(37):
            n = 3 + int(rng.uniforms(1)[0] * 20)
            for i in rng.sample(200, n):
                lines.append(f"{u}\t{i}\t1\t{i}\n")
        path = tmp_path / "u.data"
        path.write_text("".join(lines))
        split = split_of(path)
        n = 5
        buckets = interaction_buckets(split, n=n)
        order = sorted(split.clients,
                       key=lambda u: (len(split.clients[u].positives), u))
        base, rem = divmod(len(order), n)
        sizes = [base + (1 if i >= n - rem else 0) for i in range(n)]
        expect = {}
        at = 0
        for b, size in enumerate(sizes):
            for uid in order[at:at + size]:
                expect[uid] = b
            at += size
        assert buckets == expect

    def test_bucket_sizes_differ_by_at_most_one(self, tmp_path):
        lines = ["%d\t%d\t1\t%d\n" % (u, i, i) for u in range(23) for i in range(4)]
        path = tmp_path / "u.data"
        path.write_text("".join(lines))
        split = split_of(path)
        buckets = interaction_buckets(split, n=7)
        sizes = np.bincount(list(buckets.values()), minlength=7)
        assert sizes.max() - sizes.min() <= 1


class TestSynthetic:
    def test_shape_matches_request(self, tmp_path):
        path = tmp_path / "synth.data"
        write_synthetic_dataset(path, n_users=25, n_items=200,
                                n_interactions=800, seed=3)
        inter, cat, dups = load_dataset(path, FORMAT_PRESETS["ml-100k"])
        assert cat.n_users == 25 and cat.n_items == 200
        assert len(inter) == 800 and dups == 0

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.data", tmp_path / "b.data"
        write_synthetic_dataset(a, n_users=10, n_items=200, n_interactions=300, seed=9)
        write_synthetic_dataset(b, n_users=10, n_items=200, n_interactions=300, seed=9)
        assert a.read_bytes() == b.read_bytes()

    def test_activity_cap_supports_negative_sampling(self, tmp_path):
        path = tmp_path / "synth.data"
        write_synthetic_dataset(path, n_users=12, n_items=160,
                                n_interactions=300, seed=1)
        split = split_of(path)
        for c in split.clients.values():
            sample_negatives(c, split.catalog, "1:4", RngStream(2, "n"))

    def test_subsample_keeps_item_universe(self, tmp_path):
        path = tmp_path / "synth.data"
        write_synthetic_dataset(path, n_users=30, n_items=150,
                                n_interactions=700, seed=2)
        inter, cat, _ = load_dataset(path, FORMAT_PRESETS["ml-100k"])
        sub, subcat = subsample_users(inter, cat, 10)
        assert subcat.n_users == 10
        assert subcat.n_items == cat.n_items
        assert subcat.item_popularity.sum() == len(sub)
        kept_keys = {subcat.user_keys[i.user] for i in sub}
        assert kept_keys == set(sorted(cat.user_keys, key=int)[:10])
