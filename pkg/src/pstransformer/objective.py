"""Training loss with intermediate supervision, and the evaluation metric
(mean angular error in degrees)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray
from .errors import ContractError, ShapeError, UndefinedMetricError
from .model import ForwardOutput
from .samples import NormalMap


@dataclass
class LossBreakdown:
    """Scalar loss terms; total is their unit-weight sum."""

    main: DiffArray
    single: DiffArray
    agg1: DiffArray
    agg2: DiffArray
    total: DiffArray

    def floats(self) -> dict:
        return {
            "main": self.main.item(),
            "single": self.single.item(),
            "agg1": self.agg1.item(),
            "agg2": self.agg2.item(),
            "total": self.total.item(),
        }


def masked_mse(a, b, mask) -> DiffArray:
    """Mean over masked pixels of the squared Euclidean difference between
    3-vector fields. Defined as 0 on an empty mask.

    Accepts leading batch extents; `b` and `mask` broadcast against `a`, so
    a per-light stack can be scored against one ground truth.
    """
    a = da.constant(a)
    b_arr = np.asarray(b.values if isinstance(b, DiffArray) else b, dtype=a.dtype)
    m_arr = np.asarray(mask, dtype=a.dtype)
    if a.shape[-1] != 3 or b_arr.shape[-1] != 3:
        raise ShapeError(f"expected 3-vector fields, got {a.shape} and {b_arr.shape}")
    if m_arr.shape != a.shape[:-1] and m_arr.shape != b_arr.shape[:-1]:
        raise ShapeError(f"mask shape {m_arr.shape} does not match {a.shape}")

    diff = da.sub(a, da.constant(b_arr))
    sq = da.dsum(da.mul(diff, diff), axis=-1)  # (..., h, w)
    masked = da.mul(sq, da.constant(m_arr))
    # one mask entry per scored pixel, counting broadcast copies
    count = float(np.broadcast_to(m_arr, a.shape[:-1]).sum())
    return da.mul(da.dsum(masked), 1.0 / max(count, 1.0))


def ps_transformer_loss(out: ForwardOutput, n_gt, mask) -> LossBreakdown:
    """Unit-weight sum of the final prediction error, the mean single-view
    error over lights, and the two pooled-feature head errors."""
    for field in ("n", "n_single", "n_agg1", "n_agg2"):
        if getattr(out, field, None) is None:
            raise ContractError(f"forward output is missing {field!r}")
    gt = np.asarray(n_gt)
    m_arr = np.asarray(mask)

    main = masked_mse(out.n, gt, m_arr)
    # broadcast ground truth and mask over the light axis
    light_axis = out.n_single.values.ndim - 4
    gt_b = np.expand_dims(gt, light_axis)
    mask_b = np.expand_dims(m_arr, light_axis)
    single = masked_mse(out.n_single, gt_b, mask_b)
    agg1 = masked_mse(out.n_agg1, gt, m_arr)
    agg2 = masked_mse(out.n_agg2, gt, m_arr)
    total = da.add(da.add(main, single), da.add(agg1, agg2))
    return LossBreakdown(main=main, single=single, agg1=agg1, agg2=agg2, total=total)


def mean_angular_error(pred, gt, mask=None) -> float:
    """Mean over masked pixels of arccos(pred . gt), in degrees.

    Inputs must be unit inside the mask; dot products are clamped to
    [-1, 1] before arccos. An empty mask is an error, not zero.
    """
    if isinstance(pred, NormalMap):
        if mask is None:
            mask = pred.mask
        pred = pred.normals
    if isinstance(gt, NormalMap):
        gt = gt.normals
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"normal map shapes disagree: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise UndefinedMetricError("mean angular error over an empty mask is undefined")
    dots = np.clip((pred[mask] * gt[mask]).sum(axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())
