import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reco.exceptions import DegenerateFusionError, FormatError, ShapeError
from reco.fusion import (
    FusionConfig,
    FusionParams,
    canonical_order,
    fuse_mean,
    fuse_transformer,
    load_checkpoint,
    param_count,
    refine_batch,
    save_checkpoint,
)
from reco.memory import normalize_rows
from reco.retrieval import NeighborSet


def perturbed(cfg, seed, scale=0.2):
    rng = np.random.default_rng(seed + 100)
    params = FusionParams.init(cfg, seed=seed)
    for _, t in params.named():
        t.data = t.data + rng.normal(0, scale, t.shape)
    return params


def ref_layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def ref_attention(x, p, heads):
    s, d = x.shape
    dh = d // heads
    q, k, v = (x @ p[f"w_{n}"] + p[f"b_{n}"] for n in "qkv")
    out = np.zeros_like(x)
    for h in range(heads):
        c = slice(h * dh, (h + 1) * dh)
        a = q[:, c] @ k[:, c].T / math.sqrt(dh)
        a = np.exp(a - a.max(axis=1, keepdims=True))
        out[:, c] = (a / a.sum(axis=1, keepdims=True)) @ v[:, c]
    return out @ p["w_o"] + p["b_o"]


def straight_line_refine(x, fetched, params, branch):
    """Full-sequence pre-LN blocks on plain arrays, reading token 0."""
    st = {n.split(".", 1)[1]: t.data for n, t in params.named(branch)}
    h = np.vstack([x, fetched])
    for i in range(params.config.layers):
        attn = {key: st[f"layers.{i}.attn.{key}"] for key in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}
        h = h + ref_attention(ref_layer_norm(h, st[f"layers.{i}.ln1_g"], st[f"layers.{i}.ln1_b"]), attn, params.config.heads)
        z = ref_layer_norm(h, st[f"layers.{i}.ln2_g"], st[f"layers.{i}.ln2_b"])
        h = h + ref_gelu(z @ st[f"layers.{i}.mlp.w_1"] + st[f"layers.{i}.mlp.b_1"]) @ st[f"layers.{i}.mlp.w_2"] + st[f"layers.{i}.mlp.b_2"]
    out = ref_layer_norm(h[0], st["lnf_g"], st["lnf_b"])
    return out / np.linalg.norm(out)


@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("branch", ["image", "text"])
def test_matches_straight_line_reference(rng, layers, branch):
    cfg = FusionConfig(dim=16, heads=4, layers=layers, mlp_ratio=2.0)
    params = perturbed(cfg, seed=layers)
    x = normalize_rows(rng.standard_normal(16))
    fetched = normalize_rows(rng.standard_normal((4, 16)))
    order = np.lexsort(fetched.T[::-1])
    expect = straight_line_refine(x, fetched[order], params, branch)
    np.testing.assert_allclose(fuse_transformer(x, fetched, params, branch), expect, atol=1e-12)


def test_empty_retrieval_is_defined(rng):
    params = perturbed(FusionConfig(dim=8, heads=2), seed=0)
    x = normalize_rows(rng.standard_normal(8))
    out = fuse_transformer(x, np.zeros((0, 8)), params, "image")
    np.testing.assert_allclose(out, straight_line_refine(x, np.zeros((0, 8)), params, "image"), atol=1e-12)
    assert np.array_equal(out, fuse_transformer(x, np.zeros((0, 8)), params, "image"))


def test_permutation_invariance_bit_identical(rng):
    params = perturbed(FusionConfig(dim=16, heads=4, layers=2), seed=3)
    for _ in range(100):
        x = normalize_rows(rng.standard_normal(16))
        fetched = normalize_rows(rng.standard_normal((6, 16)))
        base = fuse_transformer(x, fetched, params, "text")
        assert np.array_equal(base, fuse_transformer(x, fetched[rng.permutation(6)], params, "text"))


def test_permutation_with_duplicate_rows(rng):
    params = perturbed(FusionConfig(dim=8, heads=2), seed=1)
    x = normalize_rows(rng.standard_normal(8))
    a = normalize_rows(rng.standard_normal((3, 8)))
    fetched = np.vstack([a, a[:1], a[1:2]])
    base = fuse_transformer(x, fetched, params, "image")
    for _ in range(20):
        assert np.array_equal(base, fuse_transformer(x, fetched[rng.permutation(5)], params, "image"))


def test_canonical_order_is_a_set_function(rng):
    f = rng.standard_normal((3, 5, 4))
    f[1, 2, 0] = f[1, 4, 0]
    out = canonical_order(f)
    again = canonical_order(f[:, rng.permutation(5)])
    assert np.array_equal(out, again)
    assert np.array_equal(np.sort(out.reshape(-1)), np.sort(f.reshape(-1)))


def test_refined_rows_unit_norm(rng):
    params = perturbed(FusionConfig(dim=16, heads=2), seed=5, scale=1.0)
    x = normalize_rows(rng.standard_normal((50, 16)))
    fetched = normalize_rows(rng.standard_normal((50 * 10, 16))).reshape(50, 10, 16)
    out = refine_batch(x, fetched, params, "image").data
    assert np.abs(np.linalg.norm(out, axis=1) - 1).max() <= 1e-6


def test_cosine_to_original_at_init(rng):
    params = FusionParams.init(FusionConfig(dim=64, heads=4), seed=0)
    x = normalize_rows(rng.standard_normal((200, 64)))
    fetched = normalize_rows(rng.standard_normal((2000, 64))).reshape(200, 10, 64)
    for branch in ("image", "text"):
        out = refine_batch(x, fetched, params, branch).data
        assert (np.sum(out * x, axis=1) > 0.9).all()


def test_branches_have_disjoint_storage():
    params = FusionParams.init(FusionConfig(dim=8, heads=2), seed=0)
    image, text = params.tensors("image"), params.tensors("text")
    assert not {id(t) for t in image} & {id(t) for t in text}
    assert not any(np.shares_memory(a.data, b.data) for a in image for b in text)


def test_init_scheme():
    params = FusionParams.init(FusionConfig(dim=64, heads=4), seed=0)
    named = dict(params.named())
    assert not named["image.layers.0.attn.w_o"].data.any()
    assert not named["image.layers.0.mlp.w_2"].data.any()
    assert not named["text.layers.0.attn.b_q"].data.any()
    w = named["image.layers.0.attn.w_q"].data
    assert np.abs(w).max() <= 0.04 and 0.015 < w.std() < 0.02


def test_dimension_mismatch(rng):
    params = FusionParams.init(FusionConfig(dim=8, heads=2), seed=0)
    with pytest.raises(ShapeError):
        fuse_transformer(np.ones(8) / math.sqrt(8), np.ones((2, 4)), params, "image")
    with pytest.raises(ShapeError):
        FusionConfig(dim=10, heads=4)


def enumerate_tensors(d, layers, r):
    shapes = []
    for _ in range(layers):
        shapes += [(d,), (d,)] + [(d, d), (d,)] * 4 + [(d,), (d,)] + [(d, r), (r,), (r, d), (d,)]
    shapes += [(d,), (d,)]
    return sum(int(np.prod(s)) for s in shapes)


def test_param_count_closed_form_and_enumeration():
    d, r = 16, 16
    closed = 4 * (d * d + d) + (d * r + r) + (r * d + d) + 2 * (2 * d) + 2 * d
    assert param_count(16, 4, 1, 1.0, branches=1) == closed == enumerate_tensors(16, 1, 16)


@settings(max_examples=25, deadline=None)
@given(d=st.sampled_from([4, 8, 12]), layers=st.integers(0, 3), r=st.sampled_from([0.5, 1.0, 2.0]))
def test_param_count_matches_tensors(d, layers, r):
    cfg = FusionConfig(dim=d, heads=2, layers=layers, mlp_ratio=r)
    assert param_count(d, 2, layers, r) == FusionParams.init(cfg).count()
    assert param_count(d, 2, layers, r, branches=1) == enumerate_tensors(d, layers, cfg.hidden)


def test_param_count_zero_layers_is_final_norm_only():
    assert param_count(16, 4, 0, branches=1) == 2 * 16


def test_param_count_ratio_sweep():
    counts = {r: param_count(512, 8, 1, r) for r in (0.5, 1.0, 2.0, 4.0)}
    best = min(counts, key=lambda r: abs(counts[r] - 3.16e6))
    assert best == 1.0
    assert counts[1.0] == 3_158_016


def test_fuse_mean_examples(rng):
    x = normalize_rows(rng.standard_normal(6))
    assert np.array_equal(fuse_mean(x, np.zeros((0, 6))), x)
    np.testing.assert_allclose(fuse_mean(x, x[None, :]), x, atol=1e-15)
    e = np.zeros(3)
    e[0] = 1.0
    np.testing.assert_allclose(fuse_mean(e, np.array([[0, 1.0, 0], [0, -1.0, 0]])), e, atol=1e-15)
    ns = NeighborSet(None, np.array([0]), np.array([1.0]), x[None, :])
    np.testing.assert_allclose(fuse_mean(x, ns), x, atol=1e-15)


def test_fuse_mean_degenerate():
    with pytest.raises(DegenerateFusionError):
        fuse_mean(np.array([1.0, 0.0]), np.array([[-1.0, 0.0]]))


def test_checkpoint_round_trip(tmp_path):
    params = perturbed(FusionConfig(dim=8, heads=2, layers=2, mlp_ratio=0.5), seed=2)
    path = save_checkpoint(params, tmp_path / "p.ckpt", log_inv_tau=2.5, extra={"epochs": 3})
    back, lit, extra = load_checkpoint(path)
    assert back.equals(params) and back.config == params.config
    assert lit == 2.5 and extra == {"epochs": 3}
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(blob[:10]))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")
