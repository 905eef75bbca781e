"""Lambertian least-squares photometric stereo: the closed-form solver used
as the analytic oracle for synthetic renders and learned predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import DegenerateLightingError, ShapeError
from .samples import NormalMap, PhotoSample

COND_LIMIT = 1e6
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass
class LightMatrix:
    """Stack of unit light directions, validated for solvability."""

    l: np.ndarray  # (m, 3)

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64)
        if self.l.ndim != 2 or self.l.shape[1] != 3:
            raise ShapeError(f"light matrix must be (m, 3), got {self.l.shape}")

    @property
    def m(self) -> int:
        return self.l.shape[0]

    @property
    def condition_number(self) -> float:
        sv = np.linalg.svd(self.l, compute_uv=False)
        if sv[-1] == 0:
            return float("inf")
        return float(sv[0] / sv[-1])

    def validate(self) -> None:
        if self.m < 3:
            raise DegenerateLightingError(
                f"need at least 3 lights, got {self.m}", condition_number=float("inf")
            )
        norms = np.linalg.norm(self.l, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise DegenerateLightingError(
                "light rows must be unit vectors", condition_number=self.condition_number
            )
        cond = self.condition_number
        if not np.isfinite(cond) or cond >= COND_LIMIT:
            raise DegenerateLightingError(
                f"light matrix is rank deficient (condition number {cond:.3g})",
                condition_number=cond,
            )


def _as_light_matrix(lights: Union[LightMatrix, np.ndarray]) -> LightMatrix:
    return lights if isinstance(lights, LightMatrix) else LightMatrix(np.asarray(lights))


def woodham_solve(
    intensities: np.ndarray, lights: Union[LightMatrix, np.ndarray]
) -> Tuple[np.ndarray, float]:
    """Invert i = albedo * (L n) in the least-squares sense for one pixel.

    Returns (unit normal, albedo). A vanishing solution falls back to the
    camera-facing normal with zero albedo.
    """
    lm = _as_light_matrix(lights)
    lm.validate()
    i = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if i.shape[0] != lm.m:
        raise ShapeError(f"{i.shape[0]} intensities for {lm.m} lights")
    b, *_ = np.linalg.lstsq(lm.l, i, rcond=None)
    albedo = float(np.linalg.norm(b))
    if albedo < 1e-12:
        return FALLBACK_NORMAL.copy(), 0.0
    return b / albedo, albedo


def solve_map(sample: PhotoSample, with_albedo: bool = False):
    """Per-pixel least-squares inversion inside the mask; rows outside the
    mask are zero. Returns the NormalMap, optionally with the albedo map."""
    lm = LightMatrix(sample.lights.directions)
    lm.validate()
    h, w = sample.mask.shape
    inside = sample.mask > 0

    # channel-mean intensities: (m, npix_masked)
    intensity = sample.images.astype(np.float64).mean(axis=-1)
    i_masked = intensity[:, inside]
    b, *_ = np.linalg.lstsq(lm.l, i_masked, rcond=None)  # (3, npix_masked)
    albedo = np.linalg.norm(b, axis=0)
    normals = np.where(albedo > 1e-12, b / np.maximum(albedo, 1e-12), FALLBACK_NORMAL[:, None])

    out = np.zeros((h, w, 3))
    out[inside] = normals.T
    result = NormalMap(out, inside)
    if not with_albedo:
        return result
    albedo_map = np.zeros((h, w))
    albedo_map[inside] = albedo
    return result, albedo_map
