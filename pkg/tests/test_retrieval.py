import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reco.memory import build_store, normalize_rows
from reco.retrieval import (
    RetrievalConfig,
    build_index,
    knn_approx,
    knn_exact,
    load_index,
    retrieve_batch,
    save_index,
    spherical_kmeans,
)
from reco.exceptions import FormatError


def full_sort_oracle(queries, mat, k):
    out = []
    for q in queries:
        sims = [float(np.dot(q, row)) for row in mat]
        order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
        out.append(order[:k])
    return np.array(out)


def clustered(rng, n, d, centers, spread=1.0):
    c = normalize_rows(rng.standard_normal((centers, d)))
    lab = rng.integers(0, centers, n)
    return normalize_rows(c[lab] + spread * rng.standard_normal((n, d)) / np.sqrt(d))


def test_self_match_ranks_first(small_store):
    cfg = RetrievalConfig(k=1, search_mode="uni", fetch_modality="opposite")
    ns = knn_exact(small_store.image_matrix[3], small_store, cfg, "image")
    assert ns.indices.tolist() == [3]
    assert np.array_equal(ns.fetched[0], small_store.text_matrix[3])


def test_tie_broken_by_lower_index():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    store = build_store(v, v)
    ns = knn_exact(normalize_rows(np.array([1.0, 1.0])), store, RetrievalConfig(k=4), "image")
    assert ns.indices.tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("search_mode", ["uni", "cross"])
@pytest.mark.parametrize("query_modality", ["image", "text"])
def test_exact_matches_full_sort(rng, search_mode, query_modality):
    store = build_store(rng.standard_normal((1000, 12)), rng.standard_normal((1000, 12)))
    queries = normalize_rows(rng.standard_normal((100, 12)))
    cfg = RetrievalConfig(k=10, search_mode=search_mode, fetch_modality="same")
    side = cfg.search_side(query_modality)
    oracle = full_sort_oracle(queries, store.matrix(side), 10)
    got = np.array([knn_exact(q, store, cfg, query_modality).indices for q in queries])
    assert np.array_equal(got, oracle)


@pytest.mark.parametrize("search_mode,fetch,q_mod,search_side,fetch_side", [
    ("uni", "opposite", "image", "image", "text"),
    ("uni", "same", "image", "image", "image"),
    ("cross", "opposite", "image", "text", "text"),
    ("cross", "same", "text", "image", "text"),
    ("uni", "opposite", "text", "text", "image"),
])
def test_four_scenarios_fetch_paired_rows(small_store, rng, search_mode, fetch, q_mod, search_side, fetch_side):
    cfg = RetrievalConfig(k=5, search_mode=search_mode, fetch_modality=fetch)
    q = normalize_rows(rng.standard_normal(16))
    ns = knn_exact(q, small_store, cfg, q_mod)
    assert np.array_equal(ns.indices, full_sort_oracle([q], small_store.matrix(search_side), 5)[0])
    assert np.array_equal(ns.fetched, small_store.matrix(fetch_side)[ns.indices])
    assert (np.diff(ns.similarities) <= 0).all()


def test_k_too_large(small_store):
    with pytest.raises(ValueError):
        knn_exact(small_store.image_matrix[0], small_store, RetrievalConfig(k=201), "image")
    cfg = RetrievalConfig(k=200, exclude_self=True)
    with pytest.raises(ValueError):
        knn_exact(small_store.image_matrix[0], small_store, cfg, "image")


def test_exclude_self(small_store):
    cfg = RetrievalConfig(k=3, exclude_self=True)
    ns = knn_exact(small_store.image_matrix[3], small_store, cfg, "image")
    assert 3 not in ns.indices.tolist()
    assert len(ns) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(k=0)
    with pytest.raises(ValueError):
        RetrievalConfig(search_mode="both")
    with pytest.raises(ValueError):
        RetrievalConfig(fetch_modality="other")
    assert RetrievalConfig(k=7).inference_k == 7
    assert RetrievalConfig(k=7, k_prime=2).inference_k == 2


def test_batch_equals_single_calls(rng):
    store = build_store(rng.standard_normal((10_000, 16)), rng.standard_normal((10_000, 16)))
    queries = normalize_rows(rng.standard_normal((256, 16)))
    queries[5] = queries[4]
    cfg = RetrievalConfig(k=10, search_mode="cross")
    batch = retrieve_batch(queries, store, cfg, "text")
    assert len(batch) == 256
    assert batch[4].same_as(batch[5])
    for i in range(0, 256, 5):
        assert batch[i].same_as(knn_exact(queries[i], store, cfg, "text"))
    assert retrieve_batch(queries[:1], store, cfg, "text")[0].same_as(batch[0])


def test_single_partition_is_exact(small_store, rng):
    index = build_index(small_store, "image", 1)
    cfg = RetrievalConfig(k=10)
    for q in normalize_rows(rng.standard_normal((20, 16))):
        assert knn_approx(q, index, cfg, "image", 1).same_as(knn_exact(q, small_store, cfg, "image"))


def test_one_point_per_partition():
    x = np.eye(6)
    store = build_store(x, x)
    index = build_index(store, "image", 6)
    assert sorted(p.size for p in index.postings_) == [1] * 6


def test_full_probe_equals_exact(rng):
    store = build_store(clustered(rng, 3000, 16, 20), rng.standard_normal((3000, 16)))
    index = build_index(store, "image", 16, seed=3)
    cfg = RetrievalConfig(k=10, fetch_modality="opposite")
    for q in normalize_rows(rng.standard_normal((50, 16))):
        assert knn_approx(q, index, cfg, "image", 16).same_as(knn_exact(q, store, cfg, "image"))


def test_query_at_centroid_returns_partition_nearest(rng):
    store = build_store(clustered(rng, 2000, 16, 10), rng.standard_normal((2000, 16)))
    index = build_index(store, "image", 10)
    cfg = RetrievalConfig(k=1)
    for p in range(10):
        c = normalize_rows(index.centroids_[p])
        got = knn_approx(c, index, cfg, "image", 1)
        assert index.probe_order(c)[0] == p
        members = index.postings_[p]
        best = members[np.lexsort((members, -(store.image_matrix[members] @ c)))[0]]
        assert got.indices.tolist() == [best]


def _recall(index, store, queries, n_probe, k=10):
    exact = retrieve_batch(queries, store, RetrievalConfig(k=k), "image")
    hits = 0
    for q, e in zip(queries, exact):
        a = knn_approx(q, index, RetrievalConfig(k=k), "image", n_probe)
        hits += len(set(a.indices.tolist()) & set(e.indices.tolist()))
    return hits / (k * len(queries))


@pytest.fixture(scope="module")
def big_index():
    rng = np.random.default_rng(7)
    x = clustered(rng, 50_200, 32, 64)
    store = build_store(x[:50_000], x[:50_000])
    return store, build_index(store, "image", 64, seed=0), x[50_000:]


def test_recall_at_ten(big_index):
    store, index, queries = big_index
    assert _recall(index, store, queries, 8) >= 0.95


def test_recall_monotone_in_probes(big_index):
    store, index, queries = big_index
    curve = [_recall(index, store, queries[:60], p) for p in (1, 2, 4, 8, 16, 64)]
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    assert curve[-1] == 1.0


def test_index_validation(small_store):
    with pytest.raises(ValueError):
        build_index(small_store, "image", 0)
    with pytest.raises(ValueError):
        build_index(small_store, "image", 201)
    index = build_index(small_store, "image", 4)
    with pytest.raises(ValueError):
        knn_approx(small_store.image_matrix[0], index, RetrievalConfig(), "image", 0)
    with pytest.raises(ValueError):
        knn_approx(small_store.text_matrix[0], index, RetrievalConfig(), "text", 2)


def test_kmeans_deterministic(rng):
    x = clustered(rng, 500, 8, 5)
    c1, l1 = spherical_kmeans(x, 5, seed=2)
    c2, l2 = spherical_kmeans(x, 5, seed=2)
    assert np.array_equal(c1, c2) and np.array_equal(l1, l2)


def test_index_round_trip(tmp_path, small_store, rng):
    index = build_index(small_store, "text", 8, seed=1)
    path = save_index(index, tmp_path / "m.ivf")
    assert path.read_bytes()[:8] == b"RECOIVF1"
    back = load_index(path, small_store)
    cfg = RetrievalConfig(k=5, search_mode="cross")
    for q in normalize_rows(rng.standard_normal((10, 16))):
        assert knn_approx(q, back, cfg, "image", 2).same_as(knn_approx(q, index, cfg, "image", 2))
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 1
    (tmp_path / "bad.ivf").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_index(tmp_path / "bad.ivf", small_store)
    other = build_store(rng.standard_normal((5, 16)), rng.standard_normal((5, 16)))
    with pytest.raises(FormatError):
        load_index(path, other)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8), mode=st.sampled_from(["uni", "cross"]),
       q_mod=st.sampled_from(["image", "text"]))
def test_own_row_first_and_determinism(seed, k, mode, q_mod):
    rng = np.random.default_rng(seed)
    store = build_store(rng.standard_normal((40, 6)), rng.standard_normal((40, 6)))
    cfg = RetrievalConfig(k=k, search_mode=mode)
    row = int(rng.integers(40))
    q = store.matrix(cfg.search_side(q_mod))[row]
    a = knn_exact(q, store, cfg, q_mod)
    assert a.indices[0] == row
    assert a.same_as(knn_exact(q, store, cfg, q_mod))
    assert np.array_equal(a.fetched, store.matrix(cfg.fetch_side(q_mod))[a.indices])
