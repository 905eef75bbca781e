"""Synthetic capture generation: analytic surfaces shaded with a
Lambertian + Blinn-Phong model under hemispherical lights, attached shadows
included, plus the on-disk sample/dataset formats and normal-map export."""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .binio import Reader, pack_u32, pack_u64
from .errors import (
    ChecksumError,
    ContractError,
    FormatError,
    ParameterError,
    TruncatedError,
    VersionError,
)
from .samples import LightSet, NormalMap, PhotoSample

SAMPLE_MAGIC = b"PSSAMP1"
MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "PSDATA v1"
VIEW_DIR = np.array([0.0, 0.0, 1.0])


@dataclass
class SceneSpec:
    """Recipe for one synthetic capture. The orthographic camera looks down
    +z; surface normals face it inside the mask."""

    kind: str = "sphere"  # sphere | blob
    height: int = 32
    width: int = 32
    channels: int = 3
    albedo_range: tuple = (0.05, 1.0)
    specular: float = 0.0  # k_s
    shininess: float = 32.0
    noise: float = 0.0
    seed: int = 0
    radius_frac: float = 0.45  # sphere footprint radius / min extent
    min_nz: float = 0.05  # sphere mask keeps pixels with n_z above this
    bumps: int = 5  # blob heightfield bump count

    def __post_init__(self):
        if self.kind not in ("sphere", "blob"):
            raise ParameterError(f"unknown surface kind {self.kind!r}")
        if not 0.0 <= self.specular <= 0.5:
            raise ParameterError(f"specular strength must be in [0, 0.5], got {self.specular}")
        if self.specular > 0 and not 8.0 <= self.shininess <= 256.0:
            raise ParameterError(f"shininess must be in [8, 256], got {self.shininess}")
        if self.noise < 0:
            raise ParameterError("noise sigma must be nonnegative")
        lo, hi = self.albedo_range
        if not (0.05 <= lo <= hi <= 1.0):
            raise ParameterError(f"albedo range must sit inside [0.05, 1], got {self.albedo_range}")


def sample_lights(m: int, min_z: float = 0.2, rng: Optional[np.random.Generator] = None) -> LightSet:
    """Uniform directions on the spherical cap z >= min_z (area-uniform: z
    is uniform on [min_z, 1])."""
    if m < 1:
        raise ParameterError("need at least one light")
    if not 0.0 <= min_z < 1.0:
        raise ParameterError(f"min_z must be in [0, 1), got {min_z}")
    rng = rng if rng is not None else np.random.default_rng()
    z = rng.uniform(min_z, 1.0, size=m)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return LightSet(dirs.astype(np.float32))


def _smooth_field(rng: np.random.Generator, h: int, w: int, lo: float, hi: float) -> np.ndarray:
    """Low-frequency random field rescaled into [lo, hi]."""
    coarse = rng.random((6, 6))
    f = ndimage.zoom(coarse, (h / 6, w / 6), order=1)[:h, :w]
    span = f.max() - f.min()
    if span < 1e-12:
        return np.full((h, w), 0.5 * (lo + hi))
    return lo + (hi - lo) * (f - f.min()) / span


def _sphere_geometry(spec: SceneSpec):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = spec.radius_frac * min(h, w)
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    rho2 = dx * dx + dy * dy
    nz = np.sqrt(np.maximum(0.0, 1.0 - rho2))
    normals = np.stack([dx, dy, nz], axis=-1)
    mask = (rho2 < 1.0) & (nz >= spec.min_nz)
    normals[~mask] = 0.0
    return normals, mask


def _blob_geometry(spec: SceneSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    z = np.zeros((h, w))
    for _ in range(spec.bumps):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        sigma = rng.uniform(0.15, 0.35) * scale
        amp = rng.uniform(-0.25, 0.25) * scale
        z += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    zy, zx = np.gradient(z)
    normals = np.stack([-zx, -zy, np.ones_like(z)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    mask = np.ones((h, w), dtype=bool)
    return normals, mask


def render_sample(spec: SceneSpec, lights: LightSet) -> PhotoSample:
    """Shade the surface per pixel and light:
    I = rho_d * max(0, n.l) + k_s * max(0, n.h)^alpha * [n.l > 0],
    with h the light/view half vector, then Gaussian noise clamped at zero.
    Identical (spec, lights) always produce bit-identical samples."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "sphere":
        normals, mask = _sphere_geometry(spec)
    else:
        normals, mask = _blob_geometry(spec, rng)
    albedo = _smooth_field(rng, spec.height, spec.width, *spec.albedo_range)

    dirs = lights.directions.astype(np.float64)
    half = dirs + VIEW_DIR
    half /= np.linalg.norm(half, axis=1, keepdims=True)

    ndl = np.einsum("hwk,mk->mhw", normals, dirs)
    lam = albedo[None] * np.maximum(0.0, ndl)
    shade = lam
    if spec.specular > 0:
        ndh = np.einsum("hwk,mk->mhw", normals, half)
        spec_term = spec.specular * np.maximum(0.0, ndh) ** spec.shininess
        shade = lam + spec_term * (ndl > 0)
    shade = shade * mask[None]

    images = np.repeat(shade[:, :, :, None], spec.channels, axis=3)
    if spec.noise > 0:
        images = images + rng.normal(0.0, spec.noise, size=images.shape)
        images = np.maximum(images, 0.0)
        images *= mask[None, :, :, None]

    gt = np.zeros((spec.height, spec.width, 3), dtype=np.float32)
    gt[mask] = normals[mask].astype(np.float32)
    return PhotoSample(
        images=images.astype(np.float32),
        lights=lights,
        mask=mask.astype(np.float32),
        normals=gt,
    )


def extract_patches(
    sample: PhotoSample,
    size: int = 8,
    stride: Optional[int] = None,
    min_mask_fraction: float = 0.5,
) -> List[PhotoSample]:
    """Sliding-window crops keeping patches whose masked fraction reaches
    the threshold. Lights are inherited; ground truth is cropped alike."""
    stride = size if stride is None else stride
    h, w = sample.mask.shape
    if size > min(h, w):
        raise ContractError(f"patch size {size} exceeds sample extent {min(h, w)}")
    patches = []
    for y0 in range(0, h - size + 1, stride):
        for x0 in range(0, w - size + 1, stride):
            window = sample.mask[y0 : y0 + size, x0 : x0 + size]
            if window.mean() < min_mask_fraction:
                continue
            patches.append(
                PhotoSample(
                    images=sample.images[:, y0 : y0 + size, x0 : x0 + size].copy(),
                    lights=sample.lights,
                    mask=window.copy(),
                    normals=None
                    if sample.normals is None
                    else sample.normals[y0 : y0 + size, x0 : x0 + size].copy(),
                )
            )
    return patches


# ---------------------------------------------------------------------------
# sample file format


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_sample(path, sample: PhotoSample) -> None:
    """magic, (h, w, c, m) as u64 LE, light directions, light intensities,
    mask, normal map, image stack (all f32 LE), CRC-32 trailer over
    everything after the magic."""
    if sample.normals is None:
        raise ContractError("sample files carry ground truth; normals are missing")
    m, h, w, c = sample.images.shape
    payload = b"".join(
        [
            pack_u64(h),
            pack_u64(w),
            pack_u64(c),
            pack_u64(m),
            _f32_bytes(sample.lights.directions),
            _f32_bytes(sample.lights.intensities),
            _f32_bytes(sample.mask),
            _f32_bytes(sample.normals),
            _f32_bytes(sample.images),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(payload)
        fh.write(pack_u32(zlib.crc32(payload)))


def read_sample(path) -> PhotoSample:
    with open(path, "rb") as fh:
        data = fh.read()
    prefix = SAMPLE_MAGIC[:-1]
    if len(data) < len(SAMPLE_MAGIC):
        raise TruncatedError(f"{path}: shorter than the magic")
    if not data.startswith(prefix):
        raise FormatError(f"{path}: not a sample file (bad magic)")
    version = data[len(prefix) : len(SAMPLE_MAGIC)]
    if version != SAMPLE_MAGIC[-1:]:
        raise VersionError(f"{path}: unsupported sample version tag {version!r}")
    if len(data) < len(SAMPLE_MAGIC) + 32 + 4:
        raise TruncatedError(f"{path}: header incomplete")

    payload = data[len(SAMPLE_MAGIC) : -4]
    stored_crc = int.from_bytes(data[-4:], "little")

    r = Reader(payload)
    h, w, c, m = (r.u64() for _ in range(4))
    counts = {
        "directions": m * 3,
        "intensities": m,
        "mask": h * w,
        "normals": h * w * 3,
        "images": m * h * w * c,
    }
    expected = 32 + 4 * sum(counts.values())
    if len(payload) < expected:
        raise TruncatedError(
            f"{path}: payload holds {len(payload)} bytes, format needs {expected}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} bytes of trailing garbage")
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch, file is corrupt")

    def block(count, shape):
        return (
            np.frombuffer(r.take(count * 4), dtype="<f4").astype(np.float32).reshape(shape)
        )

    dirs = block(counts["directions"], (m, 3))
    intens = block(counts["intensities"], (m,))
    mask = block(counts["mask"], (h, w))
    normals = block(counts["normals"], (h, w, 3))
    images = block(counts["images"], (m, h, w, c))
    return PhotoSample(images, LightSet(dirs, intens), mask, normals)


# ---------------------------------------------------------------------------
# dataset directory


@dataclass
class DatasetManifest:
    root: str
    version: str
    paths: List[str]
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.paths)

    def sample_path(self, i: int) -> str:
        return os.path.join(self.root, self.paths[i])

    def load(self, i: int) -> PhotoSample:
        return read_sample(self.sample_path(i))

    def load_all(self) -> List[PhotoSample]:
        return [self.load(i) for i in range(self.count)]


def write_manifest(root, paths: List[str], config: Optional[dict] = None) -> None:
    lines = [MANIFEST_HEADER]
    for key, value in (config or {}).items():
        lines.append(f"# {key} = {value}")
    lines.extend(paths)
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(root) -> DatasetManifest:
    manifest_path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FormatError(f"{root}: no {MANIFEST_NAME}")
    with open(manifest_path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != MANIFEST_HEADER:
        head = lines[0] if lines else ""
        raise VersionError(f"{manifest_path}: unknown dataset version {head!r}")
    config = {}
    paths = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("#"):
            key, _, value = ln[1:].partition("=")
            config[key.strip()] = value.strip()
            continue
        full = os.path.join(root, ln)
        if not os.path.exists(full):
            raise FormatError(f"{manifest_path}: listed file missing: {ln}")
        paths.append(ln)
    return DatasetManifest(root=root, version=MANIFEST_HEADER, paths=paths, config=config)


def export_normal_png(path, normal_map: NormalMap) -> None:
    """RGB = round((n+1)/2 * 255) inside the mask; background black."""
    n = np.clip(normal_map.normals, -1.0, 1.0)
    rgb = np.round((n + 1.0) / 2.0 * 255.0).astype(np.uint8)
    rgb[~normal_map.mask] = 0
    Image.fromarray(rgb, mode="RGB").save(path)
