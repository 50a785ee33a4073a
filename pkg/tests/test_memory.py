import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reco.exceptions import EmptyStoreError, FormatError, ShapeError
from reco.memory import (
    bank_bytes,
    build_store,
    dedupe_against,
    load_bank,
    manifest_path,
    parse_bank,
    save_bank,
    store_from_pairs,
)


def test_single_pair_store():
    store = store_from_pairs([([1.0, 2.0, 0.0, 0.0], [0.0, 0.0, 3.0, 4.0], 9)])
    assert len(store) == 1 and store.dim == 4
    np.testing.assert_allclose(np.linalg.norm(store.image_matrix, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(store.text_matrix[0], [0, 0, 0.6, 0.8], atol=1e-7)
    assert store.entry(0)[2] == 9


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        store_from_pairs([([0.0, 0.0], [1.0, 0.0], 0)])


def test_dimension_mismatch_rejected():
    with pytest.raises(ShapeError):
        store_from_pairs([([1.0, 0.0], [1.0, 0.0, 0.0], 0)])
    with pytest.raises(ShapeError):
        build_store(np.ones((3, 4)), np.ones((3, 5)))


def test_empty_store_rejected():
    with pytest.raises(EmptyStoreError):
        store_from_pairs([])


def test_thousand_pairs_unit_norm(rng):
    store = build_store(rng.standard_normal((1000, 32)) * 5, rng.standard_normal((1000, 32)))
    for mat in (store.image_matrix, store.text_matrix):
        assert np.abs(np.linalg.norm(mat, axis=1) - 1).max() <= 1e-6


def test_store_is_immutable(small_store):
    with pytest.raises(ValueError):
        small_store.image[0, 0] = 1.0
    with pytest.raises(ValueError):
        small_store.image_matrix[0, 0] = 1.0


def test_bank_round_trip(tmp_path, rng):
    store = build_store(rng.standard_normal((3, 8)), rng.standard_normal((3, 8)), ids=[5, 6, 7])
    path = save_bank(store, tmp_path / "m.bank", source="unit")
    back = load_bank(path)
    assert back.equals(store)
    assert back.checksum() == store.checksum()
    manifest = json.loads(manifest_path(path).read_text())
    assert manifest["dim"] == 8 and manifest["count"] == 3 and manifest["source"] == "unit"


def test_bank_round_trip_without_ids(tmp_path, rng):
    store = build_store(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    assert load_bank(save_bank(store, tmp_path / "m.bank")).equals(store)


def test_large_bank_byte_identical(tmp_path, rng):
    n, d = 100_000, 8
    store = build_store(rng.standard_normal((n, d)), rng.standard_normal((n, d)), ids=np.arange(n))
    path = save_bank(store, tmp_path / "big.bank")
    back = load_bank(path)
    assert back.equals(store)
    assert bank_bytes(back) == path.read_bytes()


def test_bank_layout(small_store):
    blob = bank_bytes(small_store)
    magic, version, dim, count, flags = struct.unpack_from("<8sIIQI", blob, 0)
    assert (magic, version, dim, count, flags) == (b"RECOBANK", 1, 16, 200, 1)
    assert len(blob) == 28 + 2 * 200 * 16 * 4 + 200 * 8 + 4


def test_created_stamp_honours_source_date_epoch(tmp_path, small_store, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    path = save_bank(small_store, tmp_path / "a.bank")
    assert json.loads(manifest_path(path).read_text())["created"] == "1970-01-01T00:00:00Z"


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "flip"])
def test_corrupt_banks_rejected(small_store, damage):
    blob = bytearray(bank_bytes(small_store))
    if damage == "magic":
        blob[:8] = b"NOTABANK"
    elif damage == "version":
        blob[8:12] = struct.pack("<I", 2)
    elif damage == "truncate":
        blob = blob[:-10]
    else:
        blob[100] ^= 0xFF
    with pytest.raises(FormatError):
        parse_bank(bytes(blob))


def test_dedupe_removes_exact_entry(small_store):
    out = dedupe_against(small_store, small_store.image_matrix[7:8], "image", 0.999)
    assert len(out) == 199
    assert small_store.ids[7] not in set(out.ids.tolist())
    assert len(small_store) == 200


def test_dedupe_orthogonal_probes_keep_everything():
    store = build_store(np.eye(4)[:3], np.eye(4)[:3])
    out = dedupe_against(store, np.eye(4)[3:], "image", 1.0)
    assert out.equals(store)


def test_dedupe_planted_duplicates(rng):
    n, d = 500, 32
    image = rng.standard_normal((n, d))
    store = build_store(image, rng.standard_normal((n, d)), ids=np.arange(n))
    planted = rng.choice(n, 5, replace=False)
    probes = store.image_matrix[planted] + 0.03 * rng.standard_normal((5, d)) / np.sqrt(d)
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    cos = store.image_matrix @ probes.T
    assert (cos[planted, range(5)] > 0.998).all()
    oracle = set(np.flatnonzero((cos >= 0.995).any(axis=1)).tolist())
    assert oracle == set(planted.tolist())
    out = dedupe_against(store, probes, "image", 0.995)
    assert set(out.ids.tolist()) == set(range(n)) - oracle


def test_dedupe_both_sides(small_store):
    out = dedupe_against(small_store, small_store.text_matrix[3:4], "both", 0.999)
    assert len(out) == 199
    out = dedupe_against(small_store, small_store.text_matrix[3:4], "image", 0.999)
    assert len(out) == 200


def test_dedupe_empty_result_is_distinct_error():
    store = build_store(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(EmptyStoreError):
        dedupe_against(store, np.ones((1, 3)), "image", 0.9)


def test_dedupe_threshold_validation(small_store):
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            dedupe_against(small_store, small_store.image_matrix[:1], "image", bad)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), threshold=st.floats(0.3, 1.0), side=st.sampled_from(["image", "text", "both"]))
def test_dedupe_idempotent_and_paired(seed, threshold, side):
    rng = np.random.default_rng(seed)
    store = build_store(rng.standard_normal((60, 4)), rng.standard_normal((60, 4)), ids=np.arange(60))
    probes = rng.standard_normal((3, 4))
    try:
        once = dedupe_against(store, probes, side, threshold)
    except EmptyStoreError:
        return
    assert dedupe_against(once, probes, side, threshold).equals(once)
    rows = once.ids.astype(np.int64)
    assert np.array_equal(once.image, store.image[rows]) and np.array_equal(once.text, store.text[rows])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20), d=st.integers(1, 9))
def test_bank_round_trip_property(seed, n, d):
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((n, d))
    image[np.abs(image).sum(axis=1) == 0] = 1.0
    store = build_store(image, rng.standard_normal((n, d)) + 0.1, ids=rng.integers(0, 2**62, n))
    assert parse_bank(bank_bytes(store)).equals(store)
