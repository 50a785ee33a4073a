"""Fusion of an embedding with its retrieved neighbours.

The learned fusion is a stack of pre-LN transformer encoder blocks applied
to the token sequence ``[x, r_1, ..., r_k]`` without positional encodings.
The refined embedding is the output at the query position after a final
layer norm, re-normalized to unit length. Because no token carries position
information and only token 0 is read out, the result does not depend on the
order of the retrieved rows.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from reco.exceptions import DegenerateFusionError, FormatError, ShapeError
from reco.numcore import (
    Tensor,
    add,
    l2_normalize_rows,
    layer_norm,
    mhsa,
    mlp,
    slice_tokens,
    take,
)

BRANCHES = ("image", "text")
CKPT_MAGIC = b"RECOCKPT"
CKPT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class FusionConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 1
    mlp_ratio: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.layers < 0 or self.mlp_ratio <= 0:
            raise ValueError(f"invalid fusion config {self}")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.hidden < 1:
            raise ValueError("mlp_ratio * dim must be at least 1")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))


def param_count(dim: int, heads: int, layers: int, mlp_ratio: float = 1.0, branches: int = 2) -> int:
    """Closed-form number of learnable fusion weights (temperature excluded)."""
    cfg = FusionConfig(dim, heads, layers, mlp_ratio)
    d, r = dim, cfg.hidden
    attention = 4 * (d * d + d)
    feed_forward = (d * r + r) + (r * d + d)
    norms = 2 * (2 * d)
    per_branch = layers * (attention + feed_forward + norms) + 2 * d
    return branches * per_branch


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _init_branch(cfg: FusionConfig, rng: np.random.Generator) -> dict:
    d, r = cfg.dim, cfg.hidden
    layers = []
    for _ in range(cfg.layers):
        layers.append({
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "attn": {
                "w_q": _trunc_normal(rng, (d, d), INIT_STD), "b_q": np.zeros(d),
                "w_k": _trunc_normal(rng, (d, d), INIT_STD), "b_k": np.zeros(d),
                "w_v": _trunc_normal(rng, (d, d), INIT_STD), "b_v": np.zeros(d),
                "w_o": np.zeros((d, d)), "b_o": np.zeros(d),
            },
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "mlp": {
                "w_1": _trunc_normal(rng, (d, r), INIT_STD), "b_1": np.zeros(r),
                "w_2": np.zeros((r, d)), "b_2": np.zeros(d),
            },
        })
    return {"layers": layers, "lnf_g": np.ones(d), "lnf_b": np.zeros(d)}


def _flatten(tree, prefix: str = ""):
    if isinstance(tree, dict):
        for key in sorted(tree):
            yield from _flatten(tree[key], f"{prefix}{key}.")
    elif isinstance(tree, list):
        for i, item in enumerate(tree):
            yield from _flatten(item, f"{prefix}{i}.")
    else:
        yield prefix[:-1], tree


def _map(tree, fn):
    if isinstance(tree, dict):
        return {k: _map(v, fn) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_map(v, fn) for v in tree]
    return fn(tree)


def is_norm_param(name: str) -> bool:
    """Layer-norm gains and biases (excluded from weight decay)."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith(("ln1_", "ln2_", "lnf_"))


class FusionParams:
    """Weights of the image and text fusion branches (no sharing)."""

    def __init__(self, config: FusionConfig, branches: dict):
        self.config = config
        self.branches = branches

    @classmethod
    def init(cls, config: FusionConfig, seed: int = 0) -> "FusionParams":
        rng = np.random.default_rng(seed)
        branches = {}
        for name in BRANCHES:
            raw = _init_branch(config, rng)
            branches[name] = _map(raw, lambda a, n=name: Tensor(a, name=n))
        params = cls(config, branches)
        for name, t in params.named():
            t.name = name
        return params

    def named(self, branch: str | None = None) -> list[tuple[str, Tensor]]:
        names = BRANCHES if branch is None else (branch,)
        out = []
        for b in names:
            out.extend((f"{b}.{key}", t) for key, t in _flatten(self.branches[b]))
        return out

    def tensors(self, branch: str | None = None) -> list[Tensor]:
        return [t for _, t in self.named(branch)]

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "FusionParams":
        clone = FusionParams(self.config, _map(self.branches, lambda t: Tensor(t.data, name=t.name)))
        return clone

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def equals(self, other: "FusionParams") -> bool:
        a, b = self.state(), other.state()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- forward


def encode_tokens(tokens, branch: dict, config: FusionConfig) -> Tensor:
    """Run the encoder blocks over (n, s, d) tokens; return (n, d) query outputs.

    The final block only computes the query row, since nothing else is read.
    """
    h = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    layers = branch["layers"]
    for i, layer in enumerate(layers):
        last = i == len(layers) - 1
        normed = layer_norm(h, layer["ln1_g"], layer["ln1_b"])
        attended = mhsa(normed, layer["attn"], config.heads, n_queries=1 if last else None)
        h = add(slice_tokens(h, 1) if last else h, attended)
        h = add(h, mlp(layer_norm(h, layer["ln2_g"], layer["ln2_b"]), layer["mlp"]))
    query = take(h, 0, axis=1)
    return l2_normalize_rows(layer_norm(query, branch["lnf_g"], branch["lnf_b"]))


def canonical_order(fetched: np.ndarray) -> np.ndarray:
    """Sort each query's neighbours lexicographically by their coordinates.

    Retrieved sets are unordered; fixing the order makes the floating-point
    reductions inside attention, and therefore the output bits, independent
    of the order the neighbours arrived in.
    """
    if fetched.shape[1] < 2:
        return fetched
    order = np.argsort(fetched[:, :, 0], axis=1, kind="stable")
    out = np.take_along_axis(fetched, order[:, :, None], axis=1)
    lead = out[:, :, 0]
    tied = np.flatnonzero((lead[:, 1:] == lead[:, :-1]).any(axis=1))
    for i in tied:
        rows = fetched[i]
        out[i] = rows[np.lexsort(rows.T[::-1])]
    return out


def build_tokens(x: np.ndarray, fetched: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    fetched = np.asarray(fetched, dtype=np.float64)
    if fetched.ndim != 3 or fetched.shape[0] != x.shape[0] or (fetched.shape[1] and fetched.shape[2] != x.shape[1]):
        raise ShapeError(f"fetched rows {fetched.shape} do not match queries {x.shape}")
    fetched = canonical_order(fetched.reshape(x.shape[0], -1, x.shape[1]))
    return np.concatenate([x[:, None, :], fetched], axis=1)


def refine_batch(x: np.ndarray, fetched: np.ndarray, params: FusionParams, branch: str) -> Tensor:
    """Refined embeddings for queries ``x`` (n, d) with neighbours (n, k, d)."""
    if x.shape[1] != params.config.dim:
        raise ShapeError(f"embedding dimension {x.shape[1]} != fusion dimension {params.config.dim}")
    return encode_tokens(build_tokens(x, fetched), params.branches[branch], params.config)


def fuse_transformer(x, neighbors, params: FusionParams, branch: str) -> np.ndarray:
    """Refine a single embedding ``x`` with a :class:`NeighborSet` (or a k×d array)."""
    fetched = np.asarray(getattr(neighbors, "fetched", neighbors), dtype=np.float64)
    d = np.asarray(x).shape[-1]
    if fetched.size == 0:
        fetched = fetched.reshape(0, d)
    if fetched.ndim != 2 or fetched.shape[1] != d:
        raise ShapeError(f"fetched rows {fetched.shape} do not match embedding dimension {d}")
    fetched = fetched[None]
    out = refine_batch(np.asarray(x, dtype=np.float64)[None, :], fetched, params, branch)
    return out.data[0]


def fuse_mean_batch(x: np.ndarray, fetched: np.ndarray) -> np.ndarray:
    tokens = build_tokens(x, fetched)
    mean = tokens.mean(axis=1)
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise DegenerateFusionError("mean of query and neighbours is the zero vector")
    return mean / norms


def fuse_mean(x, neighbors) -> np.ndarray:
    """Parameter-free baseline: normalized mean of the query and its neighbours."""
    x = np.asarray(x, dtype=np.float64)
    fetched = np.asarray(getattr(neighbors, "fetched", neighbors), dtype=np.float64)
    if fetched.size == 0:
        return x.copy()
    if fetched.ndim != 2 or fetched.shape[1] != x.shape[0]:
        raise ShapeError(f"fetched rows {fetched.shape} do not match embedding dimension {x.shape[0]}")
    return fuse_mean_batch(x[None, :], fetched[None])[0]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: FusionParams, path, log_inv_tau: float | None = None, extra: dict | None = None) -> Path:
    """Flat float64 payload behind a JSON header; CRC32 trailer over everything."""
    named = [(n, t.data) for n, t in params.named()]
    if log_inv_tau is not None:
        named.append(("temperature.log_inv_tau", np.array([log_inv_tau])))
    header = {
        "config": asdict(params.config),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in named],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    data = np.concatenate([a.reshape(-1) for _, a in named]).astype("<f8").tobytes()
    payload = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + data
    path = Path(path)
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    return path


def load_checkpoint(path) -> tuple[FusionParams, float | None, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise FormatError("checkpoint is truncated")
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("bad magic; not a RECO checkpoint")
    version, head_len = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checkpoint checksum mismatch")
    try:
        header = json.loads(blob[16:16 + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"unreadable checkpoint header: {err}") from err
    total = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    data_bytes = len(blob) - 4 - 16 - head_len
    if data_bytes != total * 8:
        raise FormatError("checkpoint payload size does not match its header")
    flat = np.frombuffer(blob, "<f8", total, 16 + head_len).astype(np.float64)
    state, off = {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        state[t["name"]] = flat[off:off + n].reshape(t["shape"])
        off += n
    params = FusionParams.init(FusionConfig(**header["config"]))
    log_inv_tau = None
    if "temperature.log_inv_tau" in state:
        log_inv_tau = float(state.pop("temperature.log_inv_tau")[0])
    params.load_state(state)
    return params, log_inv_tau, header.get("extra", {})
