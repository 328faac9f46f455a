import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embcam.activations import ActivationKind
from embcam.errors import AllExcluded, BadMagic, EmptyDatabase, FeatureReadError, KTooLarge, TruncatedFile
from embcam.gradweights import BuildConfig, SparseWeights, top_m
from embcam.synthetic import ManifestRecord
from embcam.weightdb import (HEADER_SIZE, DbConfig, DbEntry, WeightDatabase, build, build_database,
                             compact_kmeans, db_stats, decode_database, encode_database, kmeans,
                             load_database, query_nearest, record_size, save_database)

from conftest import unit


def make_db(embeddings, weights=None, labels=None, ids=None, M=1, K=4):
    n = len(embeddings)
    ids = ids or list(range(1, n + 1))
    labels = labels or [0] * n
    weights = weights or [SparseWeights([0], [1.0])] * n
    entries = [DbEntry(i, l, np.asarray(e, dtype=np.float32), w) for i, l, e, w in zip(ids, labels, embeddings, weights)]
    return WeightDatabase(entries, DbConfig(0.2, 50, M, K))


HAND_GWDB = bytes.fromhex(
    "47574442" "01000000"                      # magic, version, reserved
    "01000000" "02000000" "01000000" "04000000" "32000000"  # N D M K N_s
    "CDCC4C3E"                                 # margin 0.2f
    "00" "00" "0000"                           # activation, compacted, reserved
    "07000000" "00000000"                      # id, label
    "0000803F" "00000000"                      # embedding (1, 0)
    "03000000" "0000003F"                      # (channel 3, weight 0.5)
)


class TestFormat:
    def test_hand_encoded(self):
        db = make_db([[1.0, 0.0]], [SparseWeights([3], [0.5])], ids=[7])
        assert encode_database(db) == HAND_GWDB
        assert decode_database(HAND_GWDB) == db

    def test_size_formula(self):
        rng = np.random.default_rng(0)
        for N, D, M in [(1, 2, 1), (5, 3, 4), (17, 8, 2)]:
            embs = [unit(rng.standard_normal(D)) for _ in range(N)]
            ws = [top_m(rng.standard_normal(6), M) for _ in range(N)]
            db = make_db(embs, ws, M=M, K=6)
            assert len(encode_database(db)) == HEADER_SIZE + N * record_size(D, M) == HEADER_SIZE + N * (8 + 4 * D + 8 * M)

    def test_padding_when_k_below_m(self):
        db = make_db([[0.0, 1.0]], [SparseWeights([1, 0], [0.2, 0.1])], M=4, K=2)
        raw = encode_database(db)
        assert raw[-16:] == b"\xff\xff\xff\xff\x00\x00\x00\x00" * 2
        assert decode_database(raw) == db

    def test_file_roundtrip_and_truncation(self, tmp_path):
        db = make_db([[1.0, 0.0], [0.0, 1.0]], ids=[4, 9])
        save_database(db, tmp_path / "x.gwdb")
        assert load_database(tmp_path / "x.gwdb") == db
        raw = (tmp_path / "x.gwdb").read_bytes()
        with pytest.raises(TruncatedFile):
            decode_database(raw[:-1])
        with pytest.raises(TruncatedFile):
            decode_database(raw[:20])
        with pytest.raises(BadMagic):
            decode_database(b"GWDX" + raw[4:])

    def test_header_flags(self):
        db = make_db([[1.0, 0.0]])
        db = WeightDatabase(db.entries, DbConfig(0.5, 3, 1, 4, ActivationKind.RANK_PAIR), compacted=True)
        back = decode_database(encode_database(db))
        assert back.compacted and back.config == db.config


class TestQuery:
    def test_hand_cases(self):
        db = make_db([[1.0, 0.0], [0.0, 1.0]])
        assert query_nearest(db, unit([0.9, 0.436]))[0].id == 1
        assert query_nearest(db, [0.0, 1.0])[0].id == 2
        s = np.sqrt(0.5)
        assert query_nearest(db, [s, s])[0].id == 1

    def test_tie_prefers_lowest_id_not_position(self):
        db = make_db([[1.0, 0.0], [1.0, 0.0]], ids=[8, 3])
        assert query_nearest(db, [1.0, 0.0])[0].id == 3

    def test_empty(self):
        with pytest.raises(EmptyDatabase):
            query_nearest(WeightDatabase([], DbConfig(0.2, 1, 1, 1)), [1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(2, 8))
    def test_matches_euclidean_argmin(self, seed, n, D):
        rng = np.random.default_rng(seed)
        embs = [unit(rng.standard_normal(D)) for _ in range(n)]
        db = make_db(embs)
        q = unit(rng.standard_normal(D)).astype(np.float32)
        E = np.array([e.embedding for e in db.entries], dtype=np.float64)
        d2 = ((E - q) ** 2).sum(axis=1)
        entry, _ = query_nearest(db, q)
        assert d2[db.entries.index(entry)] <= d2.min() + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(2, 8))
    def test_agrees_with_cosine_ranking(self, seed, n, D):
        rng = np.random.default_rng(seed)
        db = make_db([unit(rng.standard_normal(D)) for _ in range(n)])
        q = unit(rng.standard_normal(D)).astype(np.float32)
        E = np.array([e.embedding for e in db.entries], dtype=np.float64)
        cos = E @ q / np.linalg.norm(E, axis=1) / np.linalg.norm(q.astype(np.float64))
        _, sim = query_nearest(db, q)
        assert sim == pytest.approx(cos.max(), abs=1e-6)


class TestBuild:
    def test_small_manifest(self, small_dataset, synth_head):
        _, records = small_dataset
        cfg = BuildConfig(num_triplets=5, top_m=8)
        db = build_database(records, synth_head, cfg)
        assert len(db) == 4 and db.excluded_ids == ()
        for e in db.entries:
            assert abs(np.linalg.norm(e.embedding.astype(np.float64)) - 1) < 1e-5
            assert len(e.weights) == 8

    def test_single_class_all_excluded(self, small_dataset, synth_head):
        _, records = small_dataset
        same = [ManifestRecord(r.id, 0, r.feature_path, r.img_w, r.img_h, r.box) for r in records]
        with pytest.raises(AllExcluded):
            build_database(same, synth_head, BuildConfig())

    def test_anchor_without_valid_triplet_is_excluded(self, small_dataset, synth_head):
        _, records = small_dataset
        # a lone class-2 record has no positive, so it is excluded and reported
        r = records[0]
        extra = ManifestRecord(99, 2, r.feature_path, r.img_w, r.img_h, r.box)
        db = build_database(records + [extra], synth_head, BuildConfig(num_triplets=3, top_m=4))
        assert db.excluded_ids == (99,)
        assert 99 not in [e.id for e in db.entries]

    def test_deterministic_and_parallel(self, train_dataset, synth_head):
        _, records = train_dataset
        cfg = BuildConfig(num_triplets=10, top_m=16, seed=5)
        a = encode_database(build_database(records, synth_head, cfg))
        b = encode_database(build_database(records, synth_head, cfg))
        c = encode_database(build_database(records, synth_head, cfg, workers=4))
        assert a == b == c

    def test_unreadable_feature(self, small_dataset, synth_head, tmp_path):
        _, records = small_dataset
        r = records[1]
        broken = records[:1] + [ManifestRecord(r.id, r.label, tmp_path / "missing.tnsr", r.img_w, r.img_h, r.box)]
        with pytest.raises(FeatureReadError, match=str(r.id)):
            build_database(broken, synth_head, BuildConfig())

    def test_self_query(self, train_dataset, synth_head):
        _, records = train_dataset
        db = build_database(records, synth_head, BuildConfig(num_triplets=5, top_m=16))
        for e in db.entries:
            assert query_nearest(db, e.embedding)[0].id == e.id


class TestCompaction:
    def test_two_pairs(self):
        a, b = unit([1.0, 0.2]), unit([-0.3, 1.0])
        db = make_db([a, a, b, b], labels=[0, 0, 1, 1])
        dense = {1: np.array([1.0, 0, 0, 0]), 2: np.array([0.0, 1, 0, 0]),
                 3: np.array([0.0, 0, 2, 0]), 4: np.array([0.0, 0, 0, 4])}
        out = compact_kmeans(db, dense, 2, 10, seed=0)
        assert out.compacted
        by_label = {e.label: e for e in out.entries}
        np.testing.assert_array_equal(by_label[0].embedding, db.entries[0].embedding)
        np.testing.assert_array_equal(by_label[1].embedding, db.entries[2].embedding)
        # M=1; pairwise means (0.5, 0.5, 0, 0) and (0, 0, 1, 2)
        assert list(by_label[0].weights) == [(0, 0.5)]
        assert list(by_label[1].weights) == [(3, 2.0)]

    def test_k_equals_n_preserves_contents(self, train_dataset, synth_head):
        _, records = train_dataset
        res = build(records, synth_head, BuildConfig(num_triplets=5, top_m=16))
        db = res.database
        out = compact_kmeans(db, res.dense, len(db), 50, seed=1)
        pairs = lambda d: sorted((e.embedding.tobytes(), e.weights.channels.tobytes(), e.weights.weights.tobytes())
                                 for e in d.entries)
        assert pairs(out) == pairs(db)
        for e in db.entries:
            assert query_nearest(out, e.embedding)[0].embedding.tobytes() == e.embedding.tobytes()

    def test_k_too_large(self):
        db = make_db([[1.0, 0.0]])
        with pytest.raises(KTooLarge):
            compact_kmeans(db, {1: np.zeros(4)}, 2, 5, 0)

    def test_kmeans_reaches_fixed_point(self):
        rng = np.random.default_rng(3)
        X = np.vstack([rng.normal(c, 0.05, (20, 2)) for c in [(0, 0), (3, 3), (0, 3)]])
        centers, assign = kmeans(X, 3, 100, seed=0)
        assert len(set(assign.tolist())) == 3
        d = ((X[:, None] - centers[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(np.argmin(d, axis=1), assign)

    def test_kmeans_empty_cluster_reseeded(self):
        X = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
        _, assign = kmeans(X, 3, 20, seed=0)
        assert set(assign.tolist()) == {0, 1, 2}


class TestStats:
    def test_histogram(self):
        ws = [SparseWeights([5, 1], [1, 0]), SparseWeights([5, 2], [1, 0]), SparseWeights([9, 5], [1, 0])]
        db = make_db([[1.0, 0.0]] * 3, ws, M=2, K=10)
        stats = db_stats(db)
        assert stats.histogram == {5: 2, 9: 1}
        assert sum(stats.histogram.values()) == stats.count == 3

    def test_synthetic_concentration(self, train_dataset, synth_head):
        _, records = train_dataset
        db = build_database(records, synth_head, BuildConfig(num_triplets=50, top_m=16))
        hist = db_stats(db).histogram
        assert sum(hist.values()) == len(db)
        assert len(hist) <= 2 * 3
