"""Transformer building blocks expressed with the tape ops."""
from __future__ import annotations

import math

from reco.exceptions import ShapeError
from reco.numcore.tensor import (
    Tensor,
    _record,
    as_tensor,
    bmm,
    gelu,
    reshape,
    slice_tokens,
    softmax_rows,
    transpose,
)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` over the last axis of an arbitrary-rank ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    flat = x.data.reshape(-1, d_in)
    W = weight.data
    out = (flat @ W + bias.data).reshape(*x.shape[:-1], d_out)

    def grad(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ W.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), grad, "linear")


def mhsa(x: Tensor, params: dict, heads: int, n_queries: int | None = None) -> Tensor:
    """Multi-head self-attention without masking or positional terms.

    ``x`` is (s, d) or (n, s, d). ``params`` holds ``w_q, b_q, w_k, b_k,
    w_v, b_v, w_o, b_o`` with weights laid out (d_in, d_out). With
    ``n_queries`` set, only the first that many tokens attend and the output
    has that many rows; keys and values still span the whole sequence.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    n, s, d = x.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    sq = s if n_queries is None else n_queries

    def heads_of(src, rows, w, b):
        proj = linear(src, params[w], params[b])
        proj = transpose(reshape(proj, (n, rows, heads, dh)), (0, 2, 1, 3))
        return reshape(proj, (n * heads, rows, dh))

    q_src = x if sq == s else slice_tokens(x, sq)
    q = heads_of(q_src, sq, "w_q", "b_q")
    k = heads_of(x, s, "w_k", "b_k")
    v = heads_of(x, s, "w_v", "b_v")
    attn = softmax_rows(bmm(q, transpose(k, (0, 2, 1))), scale=1.0 / math.sqrt(dh))
    ctx = reshape(bmm(attn, v), (n, heads, sq, dh))
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (sq, d) if squeeze else (n, sq, d))
    return linear(merged, params["w_o"], params["b_o"])


def mlp(x: Tensor, params: dict) -> Tensor:
    hidden = gelu(linear(x, params["w_1"], params["b_1"]))
    return linear(hidden, params["w_2"], params["b_2"])
