"""Attention-stack tests against brute-force oracles plus the permutation
and set-size properties the pooling construction must satisfy."""

import numpy as np
import pytest
from scipy.special import erf

from pstransformer import attention as att
from pstransformer import diffarray as da
from pstransformer.errors import ConfigError, EmptySetError, ShapeError

F64 = np.float64


# ---------------------------------------------------------------------------
# oracles: direct transcriptions with explicit loops, f64


def attention_oracle(Q, K, V):
    """Explicit exp/sum/weighted-sum attention, one query row at a time."""
    out = np.zeros((Q.shape[0], V.shape[1]), dtype=F64)
    scale = 1.0 / np.sqrt(K.shape[1])
    for i in range(Q.shape[0]):
        scores = np.array([np.dot(Q[i], K[j]) * scale for j in range(K.shape[0])])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        out[i] = sum(w[j] * V[j] for j in range(V.shape[0]))
    return out


def multihead_oracle(xq, xkv, p):
    """Head-by-head brute force using the parameter values directly."""
    Q = xq @ p.wq.weight.values + p.wq.bias.values
    K = xkv @ p.wk.weight.values + p.wk.bias.values
    V = xkv @ p.wv.weight.values + p.wv.bias.values
    dh = p.head_dim
    heads = []
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        heads.append(attention_oracle(Q[:, sl], K[:, sl], V[:, sl]))
    cat = np.concatenate(heads, axis=1)
    return cat @ p.wo.weight.values + p.wo.bias.values


def gelu_oracle(x):
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def encoder_block_oracle(f, p):
    """Scripted transcription of the block: residual on the query
    projection, then the gated feed-forward residual (eval mode)."""
    q = f @ p.attn.wq.weight.values + p.attn.wq.bias.values
    h = q + multihead_oracle(f, f, p.attn)
    y = gelu_oracle(h @ p.ffn1.weight.values + p.ffn1.bias.values)
    return y @ p.ffn2.weight.values + p.ffn2.bias.values + h


def make_multihead(seed, d, heads, d_in=None):
    return att.init_multihead(np.random.default_rng(seed), d, heads, d_in=d_in, dtype=F64)


def make_block(seed, d, heads):
    return att.init_encoder_block(np.random.default_rng(seed), d, heads, dtype=F64)


# ---------------------------------------------------------------------------
# scaled_dot_attention


def test_single_key_returns_value_row():
    rng = np.random.default_rng(0)
    q = da.constant(rng.normal(size=(3, 4)))
    k = da.constant(rng.normal(size=(1, 4)))
    v = da.constant(rng.normal(size=(1, 5)))
    out = att.scaled_dot_attention(q, k, v).values
    for row in out:
        np.testing.assert_allclose(row, v.values[0], atol=1e-12)


def test_identical_keys_give_value_mean():
    rng = np.random.default_rng(1)
    q = da.constant(rng.normal(size=(2, 4)))
    k = da.constant(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    v = da.constant(rng.normal(size=(5, 3)))
    out = att.scaled_dot_attention(q, k, v).values
    for row in out:
        np.testing.assert_allclose(row, v.values.mean(axis=0), atol=1e-10)


def test_attention_matches_oracle():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    got = att.scaled_dot_attention(da.constant(Q), da.constant(K), da.constant(V)).values
    np.testing.assert_allclose(got, attention_oracle(Q, K, V), atol=1e-6)


def test_attention_weights_are_convex():
    rng = np.random.default_rng(3)
    q = da.constant(rng.normal(size=(4, 6)) * 3)
    k = da.constant(rng.normal(size=(9, 6)) * 3)
    scores = da.mul(da.matmul(q, da.swap_last2(k)), 1.0 / np.sqrt(6))
    w = da.softmax(scores, axis=-1).values
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        att.scaled_dot_attention(
            da.constant(np.zeros((2, 3))),
            da.constant(np.zeros((2, 4))),
            da.constant(np.zeros((2, 4))),
        )
    with pytest.raises(EmptySetError):
        att.scaled_dot_attention(
            da.constant(np.zeros((2, 3))),
            da.constant(np.zeros((0, 3))),
            da.constant(np.zeros((0, 4))),
        )


# ---------------------------------------------------------------------------
# multihead_attention


def test_single_head_reduces_to_projected_attention():
    p = make_multihead(10, d=6, heads=1)
    rng = np.random.default_rng(11)
    xq, xkv = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))
    got = att.multihead_attention(da.constant(xq), da.constant(xkv), p).values

    q = att.affine(da.constant(xq), p.wq)
    k = att.affine(da.constant(xkv), p.wk)
    v = att.affine(da.constant(xkv), p.wv)
    want = att.affine(att.scaled_dot_attention(q, k, v), p.wo).values
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_multihead_key_value_permutation_invariance():
    p = make_multihead(12, d=8, heads=2)
    rng = np.random.default_rng(13)
    xq, xkv = rng.normal(size=(2, 8)), rng.normal(size=(6, 8))
    base = att.multihead_attention(da.constant(xq), da.constant(xkv), p).values
    for _ in range(5):
        perm = rng.permutation(6)
        out = att.multihead_attention(da.constant(xq), da.constant(xkv[perm]), p).values
        np.testing.assert_allclose(out, base, atol=1e-5)


def test_multihead_matches_per_head_oracle():
    p = make_multihead(14, d=4, heads=2)
    rng = np.random.default_rng(15)
    xq, xkv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    got = att.multihead_attention(da.constant(xq), da.constant(xkv), p).values
    np.testing.assert_allclose(got, multihead_oracle(xq, xkv, p), atol=1e-6)


def test_multihead_batched_matches_unbatched():
    p = make_multihead(16, d=8, heads=4)
    rng = np.random.default_rng(17)
    x = rng.normal(size=(5, 3, 8))
    batched = att.multihead_attention(da.constant(x), da.constant(x), p).values
    for b in range(5):
        single = att.multihead_attention(da.constant(x[b]), da.constant(x[b]), p).values
        np.testing.assert_allclose(batched[b], single, atol=1e-10)


def test_head_count_must_divide_width():
    with pytest.raises(ConfigError):
        make_multihead(18, d=6, heads=4)


# ---------------------------------------------------------------------------
# encoder_block


def test_encoder_block_permutation_equivariance():
    p = make_block(20, d=8, heads=2)
    rng = np.random.default_rng(21)
    f = rng.normal(size=(5, 8))
    base = att.encoder_block(da.constant(f), p, "eval").values
    perm = rng.permutation(5)
    out = att.encoder_block(da.constant(f[perm]), p, "eval").values
    np.testing.assert_allclose(out, base[perm], atol=1e-5)


def test_encoder_block_residual_isolation():
    p = make_block(22, d=6, heads=2)
    for affine_p in (p.attn.wv, p.attn.wo, p.ffn2):
        affine_p.weight.values[:] = 0.0
        affine_p.bias.values[:] = 0.0
    rng = np.random.default_rng(23)
    f = rng.normal(size=(4, 6))
    got = att.encoder_block(da.constant(f), p, "eval").values
    q_only = f @ p.attn.wq.weight.values + p.attn.wq.bias.values
    np.testing.assert_allclose(got, q_only, atol=1e-10)


def test_encoder_block_matches_scripted_oracle():
    p = make_block(24, d=4, heads=2)
    rng = np.random.default_rng(25)
    f = rng.normal(size=(2, 4))
    got = att.encoder_block(da.constant(f), p, "eval").values
    np.testing.assert_allclose(got, encoder_block_oracle(f, p), atol=1e-6)


def test_encoder_block_train_dropout_is_seed_deterministic():
    p = make_block(26, d=4, heads=2)
    f = da.constant(np.random.default_rng(27).normal(size=(3, 4)))
    a = att.encoder_block(f, p, "train", np.random.default_rng(5)).values
    b = att.encoder_block(f, p, "train", np.random.default_rng(5)).values
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# encode


def _encoder_parts(seed, d_in, d, heads, blocks=3):
    rng = np.random.default_rng(seed)
    embed = att.init_affine(rng, d_in, d, dtype=F64)
    blks = [att.init_encoder_block(rng, d, heads, dtype=F64) for _ in range(blocks)]
    return embed, blks


def test_encode_identical_rows_stay_identical():
    embed, blocks = _encoder_parts(30, d_in=5, d=8, heads=2)
    row = np.random.default_rng(31).normal(size=5)
    x = da.constant(np.tile(row, (4, 1)))
    out = att.encode(x, embed, blocks, "eval").values
    for r in out[1:]:
        np.testing.assert_allclose(r, out[0], atol=1e-10)


def test_encode_permutation_equivariance():
    embed, blocks = _encoder_parts(32, d_in=5, d=8, heads=2)
    rng = np.random.default_rng(33)
    x = rng.normal(size=(6, 5))
    base = att.encode(da.constant(x), embed, blocks, "eval").values
    perm = rng.permutation(6)
    out = att.encode(da.constant(x[perm]), embed, blocks, "eval").values
    np.testing.assert_allclose(out, base[perm], atol=1e-5)


def test_encode_output_width_256():
    embed, blocks = _encoder_parts(34, d_in=6, d=256, heads=8)
    rng = np.random.default_rng(35)
    for m in (1, 3, 10, 32):
        out = att.encode(da.constant(rng.normal(size=(m, 6))), embed, blocks, "eval")
        assert out.shape == (m, 256)


def test_encode_empty_set_rejected():
    embed, blocks = _encoder_parts(36, d_in=4, d=8, heads=2)
    with pytest.raises(EmptySetError):
        att.encode(da.constant(np.zeros((0, 4))), embed, blocks, "eval")


# ---------------------------------------------------------------------------
# pma_pool


def test_pma_single_element():
    p = att.init_pma(np.random.default_rng(40), d=6, heads=2, dtype=F64)
    x = np.random.default_rng(41).normal(size=(1, 6))
    got = att.pma_pool(da.constant(x), p, "eval").values
    v = x @ p.attn.wv.weight.values + p.attn.wv.bias.values
    want = (v @ p.attn.wo.weight.values + p.attn.wo.bias.values)[0]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_pma_permutation_invariance():
    p = att.init_pma(np.random.default_rng(42), d=8, heads=4, dtype=F64)
    rng = np.random.default_rng(43)
    x = rng.normal(size=(7, 8))
    base = att.pma_pool(da.constant(x), p, "eval").values
    for _ in range(5):
        out = att.pma_pool(da.constant(x[rng.permutation(7)]), p, "eval").values
        np.testing.assert_allclose(out, base, atol=1e-5)


def test_pma_duplication_invariance():
    p = att.init_pma(np.random.default_rng(44), d=8, heads=2, dtype=F64)
    x = np.random.default_rng(45).normal(size=(5, 8))
    base = att.pma_pool(da.constant(x), p, "eval").values
    doubled = att.pma_pool(da.constant(np.concatenate([x, x], axis=0)), p, "eval").values
    np.testing.assert_allclose(doubled, base, atol=1e-5)


def test_pma_output_dim_independent_of_set_size():
    p = att.init_pma(np.random.default_rng(46), d=16, heads=4, dtype=F64)
    rng = np.random.default_rng(47)
    for m in range(1, 17):
        out = att.pma_pool(da.constant(rng.normal(size=(m, 16))), p, "eval")
        assert out.shape == (16,)


def test_pma_empty_set_rejected():
    p = att.init_pma(np.random.default_rng(48), d=8, heads=2, dtype=F64)
    with pytest.raises(EmptySetError):
        att.pma_pool(da.constant(np.zeros((0, 8))), p, "eval")


# ---------------------------------------------------------------------------
# pipeline invariance: pool(encode(PX)) == pool(encode(X))


def test_pooled_pipeline_permutation_invariance_all_sizes():
    embed, blocks = _encoder_parts(50, d_in=5, d=8, heads=2)
    pma = att.init_pma(np.random.default_rng(51), d=8, heads=2, dtype=F64)
    rng = np.random.default_rng(52)
    for m in range(1, 17):
        x = rng.normal(size=(m, 5))
        base = att.pma_pool(att.encode(da.constant(x), embed, blocks, "eval"), pma, "eval").values
        perm = rng.permutation(m)
        out = att.pma_pool(att.encode(da.constant(x[perm]), embed, blocks, "eval"), pma, "eval").values
        np.testing.assert_allclose(out, base, atol=1e-5)


# ---------------------------------------------------------------------------
# gradients


def test_multihead_grad_all_parameters():
    def f(xq, xkv, wq, bq, wk, bk, wv, bv, wo, bo):
        p = att.MultiheadParams(
            att.AffineParams(wq, bq),
            att.AffineParams(wk, bk),
            att.AffineParams(wv, bv),
            att.AffineParams(wo, bo),
            heads=2,
        )
        y = att.multihead_attention(xq, xkv, p)
        return da.dsum(da.mul(y, y))

    p0 = make_multihead(60, d=4, heads=2)
    rng = np.random.default_rng(61)
    inputs = [da.constant(rng.normal(size=(3, 4))), da.constant(rng.normal(size=(4, 4)))]
    for ap in (p0.wq, p0.wk, p0.wv, p0.wo):
        inputs.append(da.constant(ap.weight.values))
        inputs.append(da.constant(ap.bias.values))
    assert da.grad_check(f, inputs) < 1e-5


def test_encoder_block_grad():
    p0 = make_block(62, d=4, heads=2)

    def f(x, w1, b1, w2, b2):
        p = att.EncoderBlockParams(
            p0.attn, att.AffineParams(w1, b1), att.AffineParams(w2, b2)
        )
        y = att.encoder_block(x, p, "eval")
        return da.dsum(da.mul(y, y))

    rng = np.random.default_rng(63)
    inputs = [
        da.constant(rng.normal(size=(3, 4))),
        da.constant(p0.ffn1.weight.values),
        da.constant(p0.ffn1.bias.values),
        da.constant(p0.ffn2.weight.values),
        da.constant(p0.ffn2.bias.values),
    ]
    assert da.grad_check(f, inputs) < 1e-5


def test_pma_grad_including_seed():
    p0 = att.init_pma(np.random.default_rng(64), d=4, heads=2, dtype=F64)

    def f(x, seed):
        p = att.PMAParams(seed, p0.attn)
        y = att.pma_pool(x, p, "eval")
        return da.dsum(da.mul(y, y))

    x = da.constant(np.random.default_rng(65).normal(size=(5, 4)))
    assert da.grad_check(f, [x, da.constant(p0.seed.values)]) < 1e-5
