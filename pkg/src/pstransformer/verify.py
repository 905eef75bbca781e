"""Gradient verification suite: central-difference checks for every
differentiable primitive and for the reduced full model, all in f64."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import attention as att
from . import diffarray as da
from . import model as mdl
from .objective import ps_transformer_loss
from .samples import LightSet, PhotoSample

REDUCED_CONFIG = dict(
    channels=1, d=8, heads=2, blocks=3, phi_channels=4, dropout_p=0.1, dtype="f64"
)


def random_patch(
    rng: np.random.Generator,
    m: int = 3,
    size: int = 4,
    channels: int = 1,
    mask_fraction: float = 1.0,
) -> PhotoSample:
    """Random but valid sample for exercising the forward/backward path."""
    z = rng.uniform(0.3, 1.0, size=m)
    phi = rng.uniform(0.0, 2 * np.pi, size=m)
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    images = rng.random((m, size, size, channels)).astype(np.float32)
    mask = (rng.random((size, size)) < mask_fraction).astype(np.float32)
    mask.flat[0] = 1.0  # never fully empty
    normals = rng.normal(size=(size, size, 3))
    normals[..., 2] = np.abs(normals[..., 2]) + 0.1
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return PhotoSample(images, LightSet(dirs), mask, normals.astype(np.float32))


def primitive_grad_suite(seed: int = 0) -> dict:
    """Max relative gradient error per differentiable primitive."""
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return da.constant(rng.normal(size=shape))

    results = {}

    results["add"] = da.grad_check(
        lambda a, b: da.dsum(da.mul(da.add(a, b), da.add(a, b))), [rand(3, 4), rand(4)]
    )
    results["sub"] = da.grad_check(
        lambda a, b: da.dsum(da.mul(da.sub(a, b), da.sub(a, b))), [rand(3, 4), rand(3, 4)]
    )
    results["mul"] = da.grad_check(lambda a, b: da.dsum(da.mul(a, b)), [rand(4, 3), rand(4, 3)])
    results["div"] = da.grad_check(
        lambda a, b: da.dsum(da.div(a, da.add(da.mul(b, b), 1.0))), [rand(3, 3), rand(3, 3)]
    )
    results["sqrt"] = da.grad_check(
        lambda a: da.dsum(da.sqrt(da.add(da.mul(a, a), 0.5))), [rand(4, 2)]
    )
    results["matmul"] = da.grad_check(
        lambda a, b: da.dsum(da.mul(da.matmul(a, b), da.matmul(a, b))),
        [rand(4, 5), rand(5, 6)],
    )
    results["softmax"] = da.grad_check(
        lambda a: da.dsum(da.mul(da.softmax(a, axis=-1), a)), [rand(3, 5)]
    )
    results["leaky_relu"] = da.grad_check(
        lambda a: da.dsum(da.mul(da.leaky_relu(a), da.leaky_relu(a))), [rand(4, 4)]
    )
    results["gelu"] = da.grad_check(lambda a: da.dsum(da.mul(da.gelu(a), 1.5)), [rand(4, 4)])
    results["dropout"] = da.grad_check(
        lambda a: da.dsum(
            da.mul(da.dropout(a, 0.4, "train", np.random.default_rng(11)), a)
        ),
        [rand(5, 5)],
    )

    def conv_f(x, w, b):
        y = da.conv2d_3x3(x, w, b)
        return da.dsum(da.mul(y, y))

    results["conv2d_3x3"] = da.grad_check(
        conv_f, [rand(2, 2, 4, 3), rand(3, 2, 3, 3), rand(3)]
    )

    for mode in ("train", "eval"):

        def bn_f(x, g, bb, _mode=mode):
            state = da.BatchNorm2dState(2, dtype=np.float64)
            state.gamma = g
            state.beta = bb
            state.running_mean = np.array([0.1, -0.2])
            state.running_var = np.array([0.9, 1.3])
            y = da.batchnorm2d(x, state, _mode)
            return da.dsum(da.mul(y, y))

        results[f"batchnorm2d_{mode}"] = da.grad_check(
            bn_f, [rand(3, 2, 4, 4), rand(2), rand(2)]
        )

    def attn_f(q, k, v):
        y = att.scaled_dot_attention(q, k, v)
        return da.dsum(da.mul(y, y))

    results["scaled_dot_attention"] = da.grad_check(
        attn_f, [rand(3, 4), rand(5, 4), rand(5, 4)]
    )
    return results


def model_grad_check(
    eps: float = 1e-5,
    max_coords_per_tensor: Optional[int] = 8,
    seed: int = 0,
) -> float:
    """Reduced full model (4x4 patch, m=3, d=8, 2 heads) against central
    differences over every parameter tensor, train mode, f64.

    Coordinates are subsampled per tensor to keep the check fast; every
    tensor is covered.
    """
    cfg = mdl.ModelConfig(**REDUCED_CONFIG)
    params = mdl.ModelParams(cfg, seed=seed)
    sample = random_patch(np.random.default_rng(seed + 1), m=3, size=4, channels=1)
    names = [name for name, _ in params.named_tensors()]

    def f(*tensors):
        params.replace_tensors(dict(zip(names, tensors)))
        # fixed dropout mask so every evaluation sees the same function
        out = mdl.forward(sample, params, "train", rng=np.random.default_rng(7))
        return ps_transformer_loss(out, sample.normals, sample.mask).total

    inputs = [t for _, t in params.named_tensors()]
    return da.grad_check(
        f,
        inputs,
        eps=eps,
        max_coords_per_input=max_coords_per_tensor,
        rng=np.random.default_rng(seed + 2),
    )
