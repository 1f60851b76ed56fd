import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crlsc.errors import (
    ConfigError,
    EmptyStoreError,
    MagicMismatchError,
    TruncatedFileError,
    ValidationError,
)
from crlsc.pqkb import (
    KnowledgeBase,
    PQCodebook,
    PQConfig,
    adc_search,
    build_kb,
    kb_from_bytes,
    kb_load,
    kb_save,
    kb_to_bytes,
    kmeans_fit,
    kmeans_objective,
    pq_decode,
    pq_encode,
    pq_encode_batch,
    pq_train,
)


def _sorted_rows(a):
    return a[np.lexsort(a.T[::-1])]


def _toy_codebook():
    cfg = PQConfig(d=2, m=2, k_star=2)
    cents = np.array([[[0.0], [1.0]], [[0.0], [1.0]]])
    return PQCodebook(cfg, cents)


# ---------------------------------------------------------------- k-means


def test_kmeans_points_equal_k():
    pts = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]])
    cents = kmeans_fit(pts, 3, iters=5, seed=1)
    np.testing.assert_array_equal(_sorted_rows(cents), _sorted_rows(pts))
    assert kmeans_objective(pts, cents) == 0.0


def test_kmeans_identical_points():
    pts = np.tile([1.5, -2.0], (10, 1))
    cents = kmeans_fit(pts, 4, iters=5, seed=3)
    np.testing.assert_array_equal(cents, np.tile([1.5, -2.0], (4, 1)))


def test_kmeans_fewer_points_than_clusters():
    pts = np.array([[0.0], [1.0]])
    cents = kmeans_fit(pts, 5, iters=3, seed=0)
    assert cents.shape == (5, 1)
    assert kmeans_objective(pts, cents) == 0.0


def test_kmeans_two_blobs_against_exhaustive_oracle():
    rng = np.random.default_rng(1234)
    a = rng.normal([-5.0, 0.0], 0.5, size=(200, 2))
    b = rng.normal([5.0, 0.0], 0.5, size=(200, 2))
    pts = np.vstack([a, b])
    cents = kmeans_fit(pts, 2, iters=50, seed=7)

    # oracle: exhaustive assignment to the true blob means, then exact means
    truth = np.array([[-5.0, 0.0], [5.0, 0.0]])
    assign = np.array(
        [min(range(2), key=lambda k: float(((p - truth[k]) ** 2).sum())) for p in pts]
    )
    means = np.array([pts[assign == k].mean(axis=0) for k in range(2)])
    got = _sorted_rows(cents)
    want = _sorted_rows(means)
    assert np.linalg.norm(got - want, axis=1).max() < 0.2


def test_kmeans_objective_non_increasing():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(300, 3))
    # fits with a larger iteration cap extend the same trajectory
    objs = [kmeans_objective(pts, kmeans_fit(pts, 8, iters=t, seed=11)) for t in range(12)]
    assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))


def test_kmeans_deterministic():
    pts = np.random.default_rng(0).normal(size=(100, 4))
    np.testing.assert_array_equal(kmeans_fit(pts, 5, 10, 42), kmeans_fit(pts, 5, 10, 42))


def test_kmeans_rejects_non_finite():
    with pytest.raises(ValidationError):
        kmeans_fit(np.array([[0.0], [np.nan]]), 1, 3, 0)


# ---------------------------------------------------------------- config / train


def test_config_requires_divisible_dim():
    with pytest.raises(ConfigError):
        PQConfig(d=10, m=3)


def test_pq_train_dimension_mismatch():
    with pytest.raises(ConfigError):
        pq_train(np.zeros((4, 6)), PQConfig(d=8, m=2, k_star=2))


def test_pq_train_single_subspace_is_kmeans():
    x = np.random.default_rng(2).normal(size=(120, 6))
    cfg = PQConfig(d=6, m=1, k_star=8, kmeans_iters=15, seed=99)
    cb = pq_train(x, cfg)
    ref = kmeans_fit(x, 8, 15, 99).astype(np.float32)
    np.testing.assert_array_equal(cb.centroids[0], ref)


def test_storage_formula_large_scale():
    cfg = PQConfig(d=512, m=8, k_star=256)
    cb = PQCodebook(cfg, np.zeros((8, 256, 64)))
    assert cb.storage_scalars == 8 * 64 * 256 == 131072


def test_code_space_size():
    assert PQConfig(d=4, m=2, k_star=4).code_space_size == 16


def test_pq_train_deterministic():
    x = np.random.default_rng(3).normal(size=(200, 8))
    cfg = PQConfig(d=8, m=2, k_star=16, seed=5)
    assert pq_train(x, cfg) == pq_train(x, cfg)


# ---------------------------------------------------------------- encode / decode


def test_encode_toy():
    np.testing.assert_array_equal(pq_encode([0.2, 0.9], _toy_codebook()), [0, 1])


def test_encode_centroid_exact_roundtrip():
    x = np.random.default_rng(4).normal(size=(300, 12))
    cb = pq_train(x, PQConfig(d=12, m=3, k_star=8))
    t = [5, 0, 7]
    v = np.concatenate([cb.centroids[j][t[j]] for j in range(3)]).astype(np.float64)
    np.testing.assert_array_equal(pq_encode(v, cb), t)
    np.testing.assert_array_equal(pq_decode(pq_encode(v, cb), cb), v)


def test_decode_zero_code():
    cb = pq_train(np.random.default_rng(6).normal(size=(50, 4)), PQConfig(d=4, m=2, k_star=4))
    np.testing.assert_array_equal(
        pq_decode([0, 0], cb), np.concatenate([cb.centroids[0][0], cb.centroids[1][0]])
    )


def test_decode_out_of_range():
    with pytest.raises(ValidationError):
        pq_decode([0, 2], _toy_codebook())


def test_encode_length_mismatch():
    with pytest.raises(ValidationError):
        pq_encode([0.1, 0.2, 0.3], _toy_codebook())


def test_encode_matches_exhaustive_code_enumeration():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 6))
    cb = pq_train(x, PQConfig(d=6, m=3, k_star=4, seed=1))
    cents = cb.centroids.astype(np.float64)
    all_codes = list(itertools.product(range(4), repeat=3))
    for v in rng.normal(size=(100, 6)):
        best = min(
            all_codes,
            key=lambda c: sum(float(((v[2 * j : 2 * j + 2] - cents[j][c[j]]) ** 2).sum()) for j in range(3)),
        )
        code = pq_encode(v, cb)
        assert tuple(int(i) for i in code) == best
        err = float(((v - pq_decode(code, cb)) ** 2).sum())
        oracle = sum(
            min(float(((v[2 * j : 2 * j + 2] - cents[j][k]) ** 2).sum()) for k in range(4)) for j in range(3)
        )
        assert err == pytest.approx(oracle, rel=1e-12, abs=1e-15)


def test_encode_tie_goes_to_lowest_index():
    cfg = PQConfig(d=1, m=1, k_star=2)
    cb = PQCodebook(cfg, np.array([[[0.0], [1.0]]]))
    assert pq_encode([0.5], cb)[0] == 0


# ---------------------------------------------------------------- search


@pytest.fixture(scope="module")
def corpus_kb():
    x = np.random.default_rng(2024).normal(size=(1000, 32))
    return x, build_kb(x, PQConfig(d=32, m=4, k_star=16, seed=3))


def test_adc_matches_decoded_distance(corpus_kb):
    x, kb = corpus_kb
    q = np.random.default_rng(1).normal(size=32)
    res = adc_search(q, kb, n=len(kb))
    exact = np.array([float(((q - v) ** 2).sum()) for v in res.vectors])
    np.testing.assert_allclose(res.distances, exact, rtol=1e-6)
    assert np.all(np.diff(res.distances) >= 0)


def test_adc_exact_match_first(corpus_kb):
    _, kb = corpus_kb
    target = kb.decoded[17]
    res = adc_search(target, kb, n=5)
    assert res.distances[0] == 0.0
    assert np.array_equal(res.vectors[0], target)


def test_adc_default_top_n(corpus_kb):
    _, kb = corpus_kb
    assert len(adc_search(np.zeros(32), kb).ids) == 30


def test_adc_n_larger_than_store():
    kb = build_kb(np.eye(4), PQConfig(d=4, m=2, k_star=4))
    assert len(adc_search(np.zeros(4), kb, n=10).ids) == 4


def test_adc_tie_order_by_id():
    cfg = PQConfig(d=1, m=1, k_star=2)
    cb = PQCodebook(cfg, np.array([[[0.0], [1.0]]]))
    kb = KnowledgeBase(cb, np.zeros((3, 1)), np.array([9, 2, 5]))
    np.testing.assert_array_equal(adc_search([0.0], kb, 3).ids, [2, 5, 9])


def test_adc_empty_store():
    cb = _toy_codebook()
    kb = KnowledgeBase(cb, np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(EmptyStoreError):
        adc_search([0.0, 0.0], kb, 1)


def test_pinned_single_subspace_equals_exact_nn():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 3))
    cfg = PQConfig(d=3, m=1, k_star=20)
    kb = KnowledgeBase(PQCodebook(cfg, x[None].astype(np.float32)), np.arange(20)[:, None], np.arange(20))
    xf = x.astype(np.float32).astype(np.float64)
    for q in rng.normal(size=(10, 3)):
        exact = np.argsort(((xf - q) ** 2).sum(axis=1), kind="stable")[:5]
        np.testing.assert_array_equal(adc_search(q, kb, 5).ids, exact)


def test_cosine_metric_normalizes():
    x = np.random.default_rng(9).normal(size=(50, 4))
    kb = build_kb(x, PQConfig(d=4, m=2, k_star=4), metric="cosine")
    np.testing.assert_array_equal(adc_search(3 * x[0], kb, 3).ids, adc_search(x[0], kb, 3).ids)


def test_concurrent_searches(corpus_kb):
    _, kb = corpus_kb
    qs = np.random.default_rng(10).normal(size=(40, 32))
    serial = [adc_search(q, kb, 10).ids for q in qs]
    out = [None] * len(qs)

    def work(i):
        out[i] = adc_search(qs[i], kb, 10).ids

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(qs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(serial, out):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([(8, 2, 4), (6, 3, 3), (4, 4, 2)]))
def test_property_code_minimizes_each_subspace(seed, shape):
    d, m, k = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, d))
    cb = pq_train(x, PQConfig(d=d, m=m, k_star=k, kmeans_iters=3, seed=seed))
    codes = pq_encode_batch(x, cb)
    ds = d // m
    for v, code in zip(x, codes):
        for j in range(m):
            dists = [float(((v[j * ds : (j + 1) * ds] - c) ** 2).sum()) for c in cb.centroids[j].astype(float)]
            assert dists[code[j]] == min(dists)


# ---------------------------------------------------------------- persistence


def test_roundtrip(tmp_path, corpus_kb):
    _, kb = corpus_kb
    path = tmp_path / "kb.crkb"
    n = kb_save(kb, path)
    assert n == path.stat().st_size
    loaded = kb_load(path)
    assert loaded == kb
    assert kb_to_bytes(loaded) == path.read_bytes()


def test_roundtrip_with_labels_and_wide_codes(tmp_path):
    x = np.random.default_rng(11).normal(size=(300, 4))
    kb = build_kb(x, PQConfig(d=4, m=1, k_star=300, kmeans_iters=2), labels=np.arange(300) % 3, source_tag="pkb:dev-a")
    assert kb.codes.dtype == np.uint16
    kb_save(kb, tmp_path / "w.crkb")
    back = kb_load(tmp_path / "w.crkb")
    assert back == kb
    assert back.source_tag == "pkb:dev-a"


def test_bad_magic(corpus_kb):
    data = bytearray(kb_to_bytes(corpus_kb[1]))
    data[0:4] = b"XXXX"
    with pytest.raises(MagicMismatchError):
        kb_from_bytes(bytes(data))


def test_truncated_payload(corpus_kb):
    data = bytearray(kb_to_bytes(corpus_kb[1]))
    # bump declared N (offset 4+1+1+4+4+4) past what the payload holds
    data[18:26] = (len(corpus_kb[1]) + 5).to_bytes(8, "little")
    with pytest.raises(TruncatedFileError):
        kb_from_bytes(bytes(data))


def test_bad_version(corpus_kb):
    from crlsc.errors import UnsupportedVersionError

    data = bytearray(kb_to_bytes(corpus_kb[1]))
    data[4] = 9
    with pytest.raises(UnsupportedVersionError):
        kb_from_bytes(bytes(data))
