"""Dense array engine with reverse-mode automatic differentiation.

Arrays wrap row-major numpy buffers (f32 or f64). Operations executed while
a Tape is active record enough context to replay gradients backward; without
an active tape the same operations run as plain numpy, which is how
evaluation mode avoids autodiff overhead entirely.

A tape is single use: one forward pass, one backward pass. Gradients are
first order only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    DegenerateStatisticsError,
    NumericError,
    ParameterError,
    ShapeError,
)

F32 = np.float32
F64 = np.float64
DEFAULT_DTYPE = F32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
LEAKY_SLOPE = 0.01

_TAPE_STACK: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class DiffArray:
    """Dense multi-dimensional array, optionally tracked on a tape.

    `values` is the forward buffer, `grad` (filled in by backward) has the
    same shape, `node_id` is the array's position on its tape and is None
    for constants and for arrays built outside any tape.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (F32, F64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar array of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "DiffArray":
        return DiffArray(self.values.copy())

    def __repr__(self):
        return (
            f"DiffArray(shape={tuple(self.shape)}, dtype={self.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class TapeRecord:
    """One recorded operation: kind, operand ids, and a pullback closure.

    The closure owns whatever forward context the backward rule needs; it
    maps the output gradient to one gradient (or None) per input.
    """

    __slots__ = ("op", "input_ids", "output_id", "pullback")

    def __init__(self, op: str, input_ids, output_id: int, pullback):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.pullback = pullback


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._arrays: dict[int, DiffArray] = {}
        self._next_id = 0
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _ensure_id(self, arr: DiffArray) -> int:
        if arr.node_id is None or self._arrays.get(arr.node_id) is not arr:
            arr.node_id = self._next_id
            self._next_id += 1
            self._arrays[arr.node_id] = arr
        return arr.node_id

    def record(
        self,
        op: str,
        inputs: Sequence[DiffArray],
        output: DiffArray,
        pullback: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> None:
        input_ids = tuple(self._ensure_id(x) for x in inputs)
        output_id = self._ensure_id(output)
        self.records.append(TapeRecord(op, input_ids, output_id, pullback))

    def backward(self, loss: DiffArray, params: Optional[Iterable[DiffArray]] = None) -> None:
        """Accumulate gradients of a scalar loss into every tracked array.

        Records are replayed in reverse topological order (the recording
        order is already topological). Parameters passed via `params` that
        never entered the graph get explicit zero gradients.
        """
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        self._used = True
        if loss.node_id is None or self._arrays.get(loss.node_id) is not loss:
            raise ValueError("loss is not on this tape")

        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values)
        }
        for rec in reversed(self.records):
            gout = grads.get(rec.output_id)
            if gout is None:
                continue
            gins = rec.pullback(gout)
            for nid, g in zip(rec.input_ids, gins):
                if g is None:
                    continue
                acc = grads.get(nid)
                # pullbacks may hand back aliased buffers (identity paths),
                # so accumulation must not mutate in place
                grads[nid] = g if acc is None else acc + g
        for nid, g in grads.items():
            arr = self._arrays[nid]
            if arr.requires_grad:
                arr.grad = g if arr.grad is None else arr.grad + g
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.values)


def backward(tape: Tape, loss: DiffArray, params: Optional[Iterable[DiffArray]] = None) -> None:
    tape.backward(loss, params)


def constant(values, dtype=None) -> DiffArray:
    if isinstance(values, DiffArray):
        return values
    return DiffArray(values, requires_grad=False, dtype=dtype)


def parameter(values, dtype=None) -> DiffArray:
    return DiffArray(values, requires_grad=True, dtype=dtype)


def _as_array(x, like: DiffArray) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=like.dtype))


def _apply(
    op: str,
    out_values: np.ndarray,
    inputs: Sequence[DiffArray],
    pullback: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> DiffArray:
    tape = _active_tape()
    track = tape is not None and any(x.requires_grad for x in inputs)
    out = DiffArray(out_values, requires_grad=track)
    if track:
        tape.record(op, inputs, out, pullback)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffArray:
    a = constant(a)
    b = _as_array(b, a)
    out = a.values + b.values
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _apply("add", out, (a, b), pull)


def sub(a, b) -> DiffArray:
    a = constant(a)
    b = _as_array(b, a)
    out = a.values - b.values
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _apply("sub", out, (a, b), pull)


def mul(a, b) -> DiffArray:
    a = constant(a)
    b = _as_array(b, a)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def pull(g):
        return _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)

    return _apply("mul", av * bv, (a, b), pull)


def div(a, b) -> DiffArray:
    a = constant(a)
    b = _as_array(b, a)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    def pull(g):
        ga = _unbroadcast(g / bv, ash)
        gb = _unbroadcast(-g * av / (bv * bv), bsh)
        return ga, gb

    return _apply("div", av / bv, (a, b), pull)


def neg(a: DiffArray) -> DiffArray:
    return _apply("neg", -a.values, (a,), lambda g: (-g,))


def sqrt(a: DiffArray) -> DiffArray:
    out = np.sqrt(a.values)

    def pull(g):
        return (g / (2.0 * out),)

    return _apply("sqrt", out, (a,), pull)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: DiffArray, shape) -> DiffArray:
    old = a.shape
    return _apply("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: DiffArray, axes) -> DiffArray:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.values.transpose(axes))
    return _apply("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last2(a: DiffArray) -> DiffArray:
    axes = list(range(a.values.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: DiffArray, shape) -> DiffArray:
    shape = tuple(shape)
    out = np.broadcast_to(a.values, shape).copy()
    ash = a.shape
    return _apply("broadcast", out, (a,), lambda g: (_unbroadcast(g, ash),))


def concat(arrays: Sequence[DiffArray], axis: int) -> DiffArray:
    arrays = [constant(x) for x in arrays]
    out = np.concatenate([x.values for x in arrays], axis=axis)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply("concat", out, arrays, pull)


# ---------------------------------------------------------------------------
# reductions


def dsum(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = a.values.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, ash).copy(),)

    return _apply("sum", out, (a,), pull)


def dmean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(dsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Batched matrix product with broadcasting over leading extents."""
    a = constant(a)
    b = constant(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape

    if bv.ndim == 2 and av.ndim > 2:
        # stack of row blocks against one matrix: flatten into a single GEMM
        a2 = av.reshape(-1, ash[-1])
        out = (a2 @ bv).reshape(ash[:-1] + (bsh[-1],))

        def pull(g):
            g2 = g.reshape(-1, bsh[-1])
            ga = (g2 @ bv.T).reshape(ash) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _apply("matmul", out, (a, b), pull)

    out = np.matmul(av, bv)

    def pull(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), ash)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bsh)
        return ga, gb

    return _apply("matmul", out, (a, b), pull)


# ---------------------------------------------------------------------------
# neural primitives


def softmax(x: DiffArray, axis: int) -> DiffArray:
    """Shift-invariant softmax along `axis`; slices sum to one."""
    if axis >= x.values.ndim or axis < -x.values.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    xv = x.values
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax received non-finite input")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", out, (x,), pull)


def activation(x: DiffArray, kind: str) -> DiffArray:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ParameterError(f"unknown activation kind: {kind!r}")


def leaky_relu(x: DiffArray) -> DiffArray:
    xv = x.values
    out = np.where(xv > 0, xv, LEAKY_SLOPE * xv)

    def pull(g):
        return (np.where(xv > 0, g, np.asarray(LEAKY_SLOPE, g.dtype) * g),)

    return _apply("leaky_relu", out.astype(xv.dtype, copy=False), (x,), pull)


def gelu(x: DiffArray) -> DiffArray:
    """Exact Gaussian-CDF form x * Phi(x)."""
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * xv.dtype.type(_INV_SQRT2)))
    out = xv * cdf

    def pull(g):
        pdf = np.exp(-0.5 * xv * xv) * xv.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + xv * pdf),)

    return _apply("gelu", out.astype(xv.dtype, copy=False), (x,), pull)


def dropout(
    x: DiffArray,
    p: float,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> DiffArray:
    """Inverted dropout: eval mode is the identity, train mode rescales
    survivors by 1/(1-p)."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return _apply("dropout_id", x.values, (x,), lambda g: (g,))
    if rng is None:
        raise ParameterError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    mask = keep * scale
    return _apply("dropout", x.values * mask, (x,), lambda g: (g * mask,))


def conv2d_3x3(x: DiffArray, weight: DiffArray, bias: DiffArray) -> DiffArray:
    """3x3 cross-correlation with zero padding 1 (spatial size preserved).

    x: [n, c_in, h, w], weight: [c_out, c_in, 3, 3], bias: [c_out].
    """
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeError(
            f"conv2d_3x3 expects 4-d input/weight, got {x.shape} and {weight.shape}"
        )
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if c_in != c_in_w:
        raise ShapeError(
            f"channel mismatch: input has {c_in} channels, weight expects {c_in_w}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} filters")

    xv, wv, bv = x.values, weight.values, bias.values
    xp = np.pad(xv, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # im2col in (c_in*9, n*h*w) layout so each direction is one GEMM
    cols = np.empty((c_in, 3, 3, n, h, w), dtype=xv.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c_in * 9, n * h * w)
    w2 = wv.reshape(c_out, c_in * 9)
    out = (w2 @ cols2).reshape(c_out, n, h, w).transpose(1, 0, 2, 3).copy()
    out += bv[None, :, None, None]

    x_needs = x.requires_grad
    w_needs = weight.requires_grad

    def pull(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        g2 = None
        if w_needs or x_needs:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * h * w)
        if w_needs:
            gw = (g2 @ cols2.T).reshape(c_out, c_in, 3, 3)
        if x_needs:
            gcols = (w2.T @ g2).reshape(c_in, 3, 3, n, h, w)
            gxp = np.zeros_like(xp)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky : ky + h, kx : kx + w] += gcols[:, ky, kx].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, 1 : h + 1, 1 : w + 1])
        return gx, gw, gb

    return _apply("conv2d_3x3", out, (x, weight, bias), pull)


class BatchNorm2dState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: DiffArray, state: BatchNorm2dState, mode: str) -> DiffArray:
    """Batch normalization over (n, h, w) per channel.

    Train mode normalizes with batch statistics and folds them into the
    running estimates; eval mode uses the running estimates.
    """
    _check_mode(mode)
    if x.values.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [n, c, h, w], got {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(
            f"channel mismatch: input has {c} channels, state holds {state.channels}"
        )
    xv = x.values
    gamma, beta = state.gamma, state.beta
    gv = gamma.values[None, :, None, None]
    eps = xv.dtype.type(state.eps)

    if mode == "train":
        count = n * h * w
        if count < 2:
            raise DegenerateStatisticsError(
                f"batch statistics need at least 2 elements per channel, got {count}"
            )
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out = xhat * gv + beta.values[None, :, None, None]

        mom = state.momentum
        unbias = count / max(count - 1, 1)
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mu).astype(xv.dtype)
        state.running_var = ((1.0 - mom) * state.running_var + mom * var * unbias).astype(xv.dtype)

        def pull(g):
            ggamma = gbeta = gx = None
            if gamma.requires_grad:
                ggamma = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gbeta = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                sg = g.sum(axis=(0, 2, 3))
                sgx = (g * xhat).sum(axis=(0, 2, 3))
                coeff = (gamma.values * inv_std / count)[None, :, None, None]
                gx = coeff * (
                    count * g
                    - sg[None, :, None, None]
                    - xhat * sgx[None, :, None, None]
                )
            return gx, ggamma, gbeta

        return _apply("batchnorm2d_train", out, (x, gamma, beta), pull)

    inv_std = 1.0 / np.sqrt(state.running_var + eps)
    xc = xv - state.running_mean[None, :, None, None]
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gv + beta.values[None, :, None, None]

    def pull(g):
        ggamma = gbeta = gx = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = g * (gamma.values * inv_std)[None, :, None, None]
        return gx, ggamma, gbeta

    return _apply("batchnorm2d_eval", out, (x, gamma, beta), pull)


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    f: Callable[..., DiffArray],
    inputs: Sequence[DiffArray],
    eps: float = 1e-5,
    max_coords_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients of a scalar function against central
    differences, in f64.

    Returns max over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). With `max_coords_per_input`
    set, a seeded random subset of coordinates is probed per input (every
    input is still covered); by default every coordinate is checked.
    """
    base = [np.asarray(x.values, dtype=F64).copy() for x in inputs]

    with Tape() as tape:
        tracked = [parameter(b.copy(), dtype=F64) for b in base]
        loss = f(*tracked)
        if loss.values.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got {loss.shape}")
        if not np.isfinite(loss.values).all():
            raise NumericError("grad_check: function evaluated to a non-finite value")
        tape.backward(loss, params=tracked)
    analytic = [t.grad for t in tracked]

    def eval_at(arrays):
        consts = [constant(a) for a in arrays]
        val = f(*consts).values
        if not np.isfinite(val).all():
            raise NumericError("grad_check: perturbed evaluation was non-finite")
        return float(val.reshape(()))

    worst = 0.0
    for k, b in enumerate(base):
        flat = b.reshape(-1)
        n = flat.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        ana_flat = analytic[k].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_at(base)
            flat[i] = orig - eps
            down = eval_at(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
