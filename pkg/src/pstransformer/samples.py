"""Domain containers shared across modules: light sets, capture bundles,
and normal maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError


@dataclass
class LightSet:
    """Calibrated directional lights: unit direction rows plus per-light
    intensity normalization factors (images are divided by these already,
    so they default to one)."""

    directions: np.ndarray  # (m, 3) unit rows
    intensities: Optional[np.ndarray] = None  # (m,)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float32)
        if self.directions.ndim != 2 or self.directions.shape[1] != 3:
            raise ContractError(f"light directions must be (m, 3), got {self.directions.shape}")
        if self.intensities is None:
            self.intensities = np.ones(len(self.directions), dtype=np.float32)
        else:
            self.intensities = np.asarray(self.intensities, dtype=np.float32)
            if self.intensities.shape != (len(self.directions),):
                raise ContractError("one intensity per light required")

    @property
    def m(self) -> int:
        return self.directions.shape[0]

    def subset(self, indices) -> "LightSet":
        return LightSet(self.directions[indices].copy(), self.intensities[indices].copy())

    def validate(self, tol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.directions.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=tol):
            raise ContractError(
                f"light directions must be unit vectors (max |norm-1| = {np.abs(norms - 1).max():.3g})"
            )


@dataclass
class PhotoSample:
    """One capture: m light-power-normalized HDR images, the lights that
    produced them, the object mask, and optional ground-truth normals."""

    images: np.ndarray  # (m, h, w, c), linear HDR, >= 0
    lights: LightSet
    mask: np.ndarray  # (h, w) in {0, 1}
    normals: Optional[np.ndarray] = None  # (h, w, 3) unit inside mask

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float32)

    @property
    def m(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset_lights(self, indices) -> "PhotoSample":
        return PhotoSample(
            images=self.images[indices],
            lights=self.lights.subset(indices),
            mask=self.mask,
            normals=self.normals,
        )

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise ContractError(f"images must be (m, h, w, c), got {self.images.shape}")
        m, h, w, _ = self.images.shape
        if m < 1:
            raise ContractError("a sample needs at least one image")
        if self.lights.m != m:
            raise ContractError(f"{m} images but {self.lights.m} lights")
        self.lights.validate()
        if self.mask.shape != (h, w):
            raise ContractError(f"mask shape {self.mask.shape} != image shape {(h, w)}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError("mask must be binary")
        if self.images.min() < 0:
            raise ContractError("pixel intensities must be nonnegative")
        if self.normals is not None:
            if self.normals.shape != (h, w, 3):
                raise ContractError(f"normal map shape {self.normals.shape} != {(h, w, 3)}")
            inside = self.mask > 0
            if inside.any():
                norms = np.linalg.norm(self.normals[inside].astype(np.float64), axis=1)
                if not np.allclose(norms, 1.0, atol=1e-4):
                    raise ContractError("ground-truth normals must be unit inside the mask")


@dataclass
class NormalMap:
    """h x w field of unit 3-vectors with a validity mask; rows outside the
    mask are zero."""

    normals: np.ndarray  # (h, w, 3)
    mask: np.ndarray = field(default=None)  # (h, w) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals)
        if self.mask is None:
            self.mask = np.ones(self.normals.shape[:2], dtype=bool)
        else:
            self.mask = np.asarray(self.mask) > 0

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]
