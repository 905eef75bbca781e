"""Permutation-invariant set encoding: scaled dot-product attention,
multi-head attention, the residual encoder block, and pooling by attention
over a learnable seed.

All operations take arrays shaped [..., m, d]; leading extents are batch
dimensions (the model stacks every pixel of a patch into one call).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray
from .errors import ConfigError, EmptySetError, ShapeError


class AffineParams:
    """Dense layer weights: y = x W + b."""

    def __init__(self, weight: DiffArray, bias: DiffArray):
        self.weight = weight
        self.bias = bias

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def init_affine(rng: np.random.Generator, d_in: int, d_out: int, dtype=da.DEFAULT_DTYPE) -> AffineParams:
    # uniform scaled by 1/sqrt(fan_in), biases included
    bound = 1.0 / math.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    b = rng.uniform(-bound, bound, size=(d_out,))
    return AffineParams(da.parameter(w, dtype=dtype), da.parameter(b, dtype=dtype))


def affine(x: DiffArray, p: AffineParams) -> DiffArray:
    return da.add(da.matmul(x, p.weight), p.bias)


class MultiheadParams:
    """Query/key/value projections, output mixing projection, head count."""

    def __init__(
        self,
        wq: AffineParams,
        wk: AffineParams,
        wv: AffineParams,
        wo: AffineParams,
        heads: int,
    ):
        d = wq.d_out
        if heads < 1:
            raise ConfigError(f"head count must be >= 1, got {heads}")
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        if not (wk.d_out == wv.d_out == d and wo.d_in == wo.d_out == d):
            raise ConfigError("all projection widths must agree")
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.heads = heads

    @property
    def d(self) -> int:
        return self.wq.d_out

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def init_multihead(
    rng: np.random.Generator,
    d: int,
    heads: int,
    d_in: Optional[int] = None,
    dtype=da.DEFAULT_DTYPE,
) -> MultiheadParams:
    d_in = d if d_in is None else d_in
    return MultiheadParams(
        wq=init_affine(rng, d_in, d, dtype),
        wk=init_affine(rng, d_in, d, dtype),
        wv=init_affine(rng, d_in, d, dtype),
        wo=init_affine(rng, d, d, dtype),
        heads=heads,
    )


class EncoderBlockParams:
    """One attention block: multi-head params plus two d->d feed-forward
    layers. No normalization layers anywhere."""

    def __init__(self, attn: MultiheadParams, ffn1: AffineParams, ffn2: AffineParams, dropout_p: float = 0.1):
        self.attn = attn
        self.ffn1 = ffn1
        self.ffn2 = ffn2
        self.dropout_p = dropout_p


def init_encoder_block(rng: np.random.Generator, d: int, heads: int, dropout_p: float = 0.1, dtype=da.DEFAULT_DTYPE) -> EncoderBlockParams:
    return EncoderBlockParams(
        attn=init_multihead(rng, d, heads, dtype=dtype),
        ffn1=init_affine(rng, d, d, dtype),
        ffn2=init_affine(rng, d, d, dtype),
        dropout_p=dropout_p,
    )


class PMAParams:
    """Learnable seed row plus the attention that pools a set onto it."""

    def __init__(self, seed: DiffArray, attn: MultiheadParams):
        if seed.shape != (1, attn.d):
            raise ConfigError(f"seed must be (1, {attn.d}), got {seed.shape}")
        self.seed = seed
        self.attn = attn


def init_pma(rng: np.random.Generator, d: int, heads: int, dtype=da.DEFAULT_DTYPE) -> PMAParams:
    bound = 1.0 / math.sqrt(d)
    seed = da.parameter(rng.uniform(-bound, bound, size=(1, d)), dtype=dtype)
    return PMAParams(seed=seed, attn=init_multihead(rng, d, heads, dtype=dtype))


# ---------------------------------------------------------------------------
# operations


def scaled_dot_attention(q: DiffArray, k: DiffArray, v: DiffArray) -> DiffArray:
    """softmax(Q K^T / sqrt(d_k)) V, softmax over the key axis.

    Output rows are convex combinations of V rows.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if k.shape[-2] < 1:
        raise EmptySetError("attention needs at least one key")
    d_k = k.shape[-1]
    scores = da.mul(da.matmul(q, da.swap_last2(k)), 1.0 / math.sqrt(d_k))
    weights = da.softmax(scores, axis=-1)
    return da.matmul(weights, v)


def multihead_attention(
    x_q: DiffArray,
    x_kv: DiffArray,
    params: MultiheadParams,
    return_query: bool = False,
):
    """Project into per-head queries/keys/values of width d/h, attend per
    head, concatenate, and mix with the output projection.

    With return_query=True also returns the full-width query projection
    (the encoder block's residual path).
    """
    q = affine(x_q, params.wq)
    k = affine(x_kv, params.wk)
    v = affine(x_kv, params.wv)
    h, dh = params.heads, params.head_dim

    def split(x: DiffArray) -> DiffArray:
        m = x.shape[-2]
        lead = x.shape[:-2]
        x = da.reshape(x, lead + (m, h, dh))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return da.transpose(x, axes)  # [..., h, m, dh]

    def merge(x: DiffArray) -> DiffArray:
        lead = x.shape[:-3]
        m = x.shape[-2]
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        x = da.transpose(x, axes)  # [..., m, h, dh]
        return da.reshape(x, lead + (m, h * dh))

    per_head = scaled_dot_attention(split(q), split(k), split(v))
    out = affine(merge(per_head), params.wo)
    if return_query:
        return out, q
    return out


def encoder_block(
    f: DiffArray,
    params: EncoderBlockParams,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> DiffArray:
    """Residual attention block: H = Q + MHA(Q, K, V) with Q, K, V projected
    from the input, then FFN2(GeLU(FFN1(H))) + H. Dropout after the GeLU in
    train mode; no layer normalization."""
    attn_out, q = multihead_attention(f, f, params.attn, return_query=True)
    h = da.add(q, attn_out)
    y = da.gelu(affine(h, params.ffn1))
    y = da.dropout(y, params.dropout_p, mode, rng)
    y = affine(y, params.ffn2)
    return da.add(y, h)


def encode(
    x: DiffArray,
    embed: AffineParams,
    blocks: Sequence[EncoderBlockParams],
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> DiffArray:
    """Embed raw set features to width d and run the encoder block stack."""
    if x.shape[-2] < 1:
        raise EmptySetError("cannot encode an empty set")
    f = affine(x, embed)
    for block in blocks:
        f = encoder_block(f, block, mode, rng)
    return f


def pma_pool(
    f_enc: DiffArray,
    params: PMAParams,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> DiffArray:
    """Pool an encoded set to one d-vector: attention with the learnable
    seed as the single query and the set as keys and values. The result
    dimension is independent of the set size."""
    del mode, rng  # pooling has no stochastic or stateful layers
    if f_enc.shape[-2] < 1:
        raise EmptySetError("cannot pool an empty set")
    lead = f_enc.shape[:-2]
    seed = da.broadcast_to(params.seed, lead + (1, params.attn.d))
    out = multihead_attention(seed, f_enc, params.attn)
    return da.reshape(out, lead + (params.attn.d,))
