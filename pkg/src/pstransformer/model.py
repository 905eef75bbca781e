"""The dual-branch surface-normal network.

Branch 1 aggregates raw per-pixel intensity+light rows, branch 2 aggregates
rows from a shared-weight CNN feature extractor concatenated with the light
direction. Each branch encodes its per-pixel set with a three-block
attention encoder and pools it to a single vector; the pooled features plus
the object mask feed an image-space convolutional predictor. Auxiliary
heads predict normals from every single-view feature map and from each
branch's pooled feature, so that all intermediate features stay tied to the
geometry during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from . import attention as att
from . import diffarray as da
from .binio import DTYPE_TAGS, TAG_DTYPES, Reader, pack_array, pack_u64, read_array
from .diffarray import BatchNorm2dState, DiffArray
from .errors import (
    ConfigError,
    ContractError,
    EmptySetError,
    FormatError,
    PatchTooSmallError,
)
from .samples import NormalMap, PhotoSample

CKPT_MAGIC = b"PSTCKPT1"
PHI_LAYERS = 6
PSI_LAYERS = 5
SINGLE_HEAD_LAYERS = 6


@dataclass
class ModelConfig:
    """Network dimensions. Defaults are the full-size configuration; the
    reduced values used by gradient tests come in through the same fields."""

    channels: int = 3
    d: int = 256
    heads: int = 8
    blocks: int = 3
    phi_channels: int = 64
    dropout_p: float = 0.1
    dtype: str = "f32"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if min(self.channels, self.d, self.heads, self.blocks, self.phi_channels) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def x1_width(self) -> int:
        return self.channels + 3

    @property
    def x2_width(self) -> int:
        return self.phi_channels + 3

    @property
    def fused_width(self) -> int:
        return 2 * self.d + 1


class ConvParams:
    def __init__(self, weight: DiffArray, bias: DiffArray):
        self.weight = weight
        self.bias = bias


def _init_conv(rng, c_in: int, c_out: int, dtype) -> ConvParams:
    bound = 1.0 / math.sqrt(c_in * 9)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
    b = rng.uniform(-bound, bound, size=(c_out,))
    return ConvParams(da.parameter(w, dtype=dtype), da.parameter(b, dtype=dtype))


class BranchParams:
    """Embedding, encoder blocks, and pooling for one aggregation branch."""

    def __init__(self, embed: att.AffineParams, blocks, pma: att.PMAParams):
        self.embed = embed
        self.blocks = list(blocks)
        self.pma = pma


def _init_branch(rng, d_in: int, cfg: ModelConfig, dtype) -> BranchParams:
    return BranchParams(
        embed=att.init_affine(rng, d_in, cfg.d, dtype),
        blocks=[
            att.init_encoder_block(rng, cfg.d, cfg.heads, cfg.dropout_p, dtype)
            for _ in range(cfg.blocks)
        ],
        pma=att.init_pma(rng, cfg.d, cfg.heads, dtype),
    )


class ModelParams:
    """Every learnable tensor of the network, addressable by a stable
    hierarchical name, plus the batch-norm running statistics."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dt = config.np_dtype
        rng = np.random.default_rng(seed)
        c, d, f = config.channels, config.d, config.phi_channels

        self.branch1 = _init_branch(rng, c + 3, config, dt)

        widths = [c + 1] + [f] * (PHI_LAYERS - 1) + [f]
        self.phi_convs = [
            _init_conv(rng, widths[i], widths[i + 1], dt) for i in range(PHI_LAYERS)
        ]
        self.phi_bns = [BatchNorm2dState(f, dtype=dt) for _ in range(PHI_LAYERS - 1)]

        self.branch2 = _init_branch(rng, f + 3, config, dt)

        fused = config.fused_width
        psi_widths = [fused] * PSI_LAYERS + [3]
        self.psi_convs = [
            _init_conv(rng, psi_widths[i], psi_widths[i + 1], dt)
            for i in range(PSI_LAYERS)
        ]

        sw = f + 3
        single_widths = [sw] * SINGLE_HEAD_LAYERS + [3]
        self.single_convs = [
            _init_conv(rng, single_widths[i], single_widths[i + 1], dt)
            for i in range(SINGLE_HEAD_LAYERS)
        ]
        self.single_bns = [
            BatchNorm2dState(sw, dtype=dt) for _ in range(SINGLE_HEAD_LAYERS - 1)
        ]

        self.agg1 = (att.init_affine(rng, d, d, dt), att.init_affine(rng, d, 3, dt))
        self.agg2 = (att.init_affine(rng, d, d, dt), att.init_affine(rng, d, 3, dt))

    # -- registry ----------------------------------------------------------

    def _named_slots(self) -> Iterator[Tuple[str, object, str]]:
        """(name, owner, attribute) triples for every learnable tensor."""
        yield from _branch_slots("branch1", self.branch1)
        yield from _conv_stack_slots("phi", self.phi_convs, self.phi_bns)
        yield from _branch_slots("branch2", self.branch2)
        yield from _conv_stack_slots("psi", self.psi_convs, [])
        yield from _conv_stack_slots("single", self.single_convs, self.single_bns)
        for group, (fc0, fc1) in (("agg1", self.agg1), ("agg2", self.agg2)):
            yield from _affine_slots(f"{group}.fc0", fc0)
            yield from _affine_slots(f"{group}.fc1", fc1)

    def named_tensors(self) -> Iterator[Tuple[str, DiffArray]]:
        for name, owner, attr in self._named_slots():
            yield name, getattr(owner, attr)

    def replace_tensors(self, mapping: dict) -> None:
        """Rebind named parameter slots to the given arrays (used to route
        externally tracked tensors through a forward pass)."""
        for name, owner, attr in self._named_slots():
            if name in mapping:
                setattr(owner, attr, mapping[name])

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, bns in (("phi", self.phi_bns), ("single", self.single_bns)):
            for i, bn in enumerate(bns):
                yield f"{prefix}.bn{i}.running_mean", bn.running_mean
                yield f"{prefix}.bn{i}.running_var", bn.running_var

    def tensor_dict(self) -> dict:
        return dict(self.named_tensors())

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def _buffer_setters(self) -> dict:
        setters = {}
        for prefix, bns in (("phi", self.phi_bns), ("single", self.single_bns)):
            for i, bn in enumerate(bns):
                setters[f"{prefix}.bn{i}.running_mean"] = (bn, "running_mean")
                setters[f"{prefix}.bn{i}.running_var"] = (bn, "running_var")
        return setters


def _affine_slots(prefix: str, p: att.AffineParams):
    yield f"{prefix}.weight", p, "weight"
    yield f"{prefix}.bias", p, "bias"


def _multihead_slots(prefix: str, p: att.MultiheadParams):
    for name, ap in (("wq", p.wq), ("wk", p.wk), ("wv", p.wv), ("wo", p.wo)):
        yield from _affine_slots(f"{prefix}.{name}", ap)


def _branch_slots(prefix: str, b: BranchParams):
    yield from _affine_slots(f"{prefix}.embed", b.embed)
    for i, block in enumerate(b.blocks):
        yield from _multihead_slots(f"{prefix}.block{i}.attn", block.attn)
        yield from _affine_slots(f"{prefix}.block{i}.ffn1", block.ffn1)
        yield from _affine_slots(f"{prefix}.block{i}.ffn2", block.ffn2)
    yield f"{prefix}.pma.seed", b.pma, "seed"
    yield from _multihead_slots(f"{prefix}.pma.attn", b.pma.attn)


def _conv_stack_slots(prefix: str, convs, bns):
    for i, conv in enumerate(convs):
        yield f"{prefix}.conv{i}.weight", conv, "weight"
        yield f"{prefix}.conv{i}.bias", conv, "bias"
    for i, bn in enumerate(bns):
        yield f"{prefix}.bn{i}.gamma", bn, "gamma"
        yield f"{prefix}.bn{i}.beta", bn, "beta"


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    return ModelParams(config, seed)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardOutput:
    """Predicted normal fields (unit rows up to fp error) plus the pooled
    branch features. Shapes are (h, w, 3) / (m, h, w, 3) from forward() and
    carry a leading batch extent from forward_many()."""

    n: DiffArray
    n_single: DiffArray
    n_agg1: DiffArray
    n_agg2: DiffArray
    f1: DiffArray = None
    f2: DiffArray = None


def build_pixel_inputs(sample: PhotoSample) -> np.ndarray:
    """Per-pixel observation sets: row j of pixel i is [I_j at i, l_j],
    shape (h*w, m, c+3)."""
    images, lights = sample.images, sample.lights.directions
    m, h, w, c = images.shape
    pix = images.transpose(1, 2, 0, 3).reshape(h * w, m, c)
    lig = np.broadcast_to(lights, (h * w, m, 3))
    return np.concatenate([pix, lig], axis=-1)


def _conv_bn_stack(x, convs, bns, mode):
    """conv -> BN -> leaky ReLU between layers; bare conv at the end."""
    last = len(convs) - 1
    for i, conv in enumerate(convs):
        x = da.conv2d_3x3(x, conv.weight, conv.bias)
        if i < last:
            if bns:
                x = da.batchnorm2d(x, bns[i], mode)
            x = da.leaky_relu(x)
    return x


def extract_feature_map(
    image: np.ndarray,
    mask: np.ndarray,
    params: ModelParams,
    mode: str,
    light: Optional[np.ndarray] = None,
) -> DiffArray:
    """Run the shared-weight feature CNN on one image (mask appended as an
    extra input channel). Returns an (h, w, phi_channels) map, or the
    light-augmented (h, w, phi_channels+3) map when a light is given."""
    dt = params.config.np_dtype
    h, w, _ = image.shape
    stacked = np.concatenate([image, mask[:, :, None]], axis=-1).astype(dt)
    x = da.constant(stacked.transpose(2, 0, 1)[None])  # (1, c+1, h, w)
    feat = _conv_bn_stack(x, params.phi_convs, params.phi_bns, mode)
    feat = da.transpose(da.reshape(feat, feat.shape[1:]), (1, 2, 0))  # (h, w, F)
    if light is None:
        return feat
    lmap = np.broadcast_to(np.asarray(light, dtype=dt), (h, w, 3)).copy()
    return da.concat([feat, da.constant(lmap)], axis=-1)


def _unit_rows(x: DiffArray) -> DiffArray:
    s = da.dsum(da.mul(x, x), axis=-1, keepdims=True)
    return da.div(x, da.sqrt(da.add(s, 1e-12)))


def forward_many(
    samples: Sequence[PhotoSample],
    params: ModelParams,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    """Batched forward over samples that share (m, h, w, c). Per-pixel sets
    from every sample are stacked into single encoder calls; light sets may
    differ between samples."""
    if not samples:
        raise ContractError("forward_many needs at least one sample")
    shapes = {s.images.shape for s in samples}
    if len(shapes) > 1:
        raise ContractError(f"batched samples must share shapes, got {sorted(shapes)}")
    images = np.stack([s.images for s in samples])
    lights = np.stack([s.lights.directions for s in samples])
    masks = np.stack([s.mask for s in samples])
    return _forward_arrays(images, lights, masks, params, mode, rng)


def forward(
    sample: PhotoSample,
    params: ModelParams,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    out = _forward_arrays(
        sample.images[None],
        sample.lights.directions[None],
        sample.mask[None],
        params,
        mode,
        rng,
    )
    return ForwardOutput(
        n=da.reshape(out.n, out.n.shape[1:]),
        n_single=da.reshape(out.n_single, out.n_single.shape[1:]),
        n_agg1=da.reshape(out.n_agg1, out.n_agg1.shape[1:]),
        n_agg2=da.reshape(out.n_agg2, out.n_agg2.shape[1:]),
        f1=da.reshape(out.f1, out.f1.shape[1:]),
        f2=da.reshape(out.f2, out.f2.shape[1:]),
    )


def _forward_arrays(images, lights, masks, params, mode, rng) -> ForwardOutput:
    cfg = params.config
    dt = cfg.np_dtype
    b, m, h, w, c = images.shape
    if m < 1:
        raise EmptySetError("forward needs at least one image/light pair")
    if h < 3 or w < 3:
        raise PatchTooSmallError(f"patch {h}x{w} too small, need at least 3x3")
    if c != cfg.channels:
        raise ContractError(f"model expects {cfg.channels} channels, sample has {c}")
    npix = h * w
    images = images.astype(dt, copy=False)
    lights = lights.astype(dt, copy=False)
    masks = masks.astype(dt, copy=False)

    # branch 1: raw intensity+light rows per pixel
    x1 = np.concatenate(
        [
            images.transpose(0, 2, 3, 1, 4).reshape(b, npix, m, c),
            np.broadcast_to(lights[:, None], (b, npix, m, 3)),
        ],
        axis=-1,
    ).reshape(b * npix, m, c + 3)
    enc1 = att.encode(da.constant(x1), params.branch1.embed, params.branch1.blocks, mode, rng)
    f1 = att.pma_pool(enc1, params.branch1.pma, mode, rng)  # (b*npix, d)

    # branch 2: CNN feature maps with the mask as an extra channel
    phi_in = np.concatenate(
        [
            images.transpose(0, 1, 4, 2, 3),
            np.broadcast_to(masks[:, None, None], (b, m, 1, h, w)),
        ],
        axis=2,
    ).reshape(b * m, c + 1, h, w)
    feat = _conv_bn_stack(da.constant(phi_in), params.phi_convs, params.phi_bns, mode)

    light_maps = np.broadcast_to(
        lights.reshape(b * m, 3)[:, :, None, None], (b * m, 3, h, w)
    ).astype(dt)
    x2_img = da.concat([feat, da.constant(light_maps)], axis=1)  # (b*m, F+3, h, w)

    fch = cfg.phi_channels
    feat_set = da.reshape(feat, (b, m, fch, h, w))
    feat_set = da.transpose(feat_set, (0, 3, 4, 1, 2))
    feat_set = da.reshape(feat_set, (b * npix, m, fch))
    light_set = np.ascontiguousarray(
        np.broadcast_to(lights[:, None], (b, npix, m, 3)).reshape(b * npix, m, 3)
    )
    x2 = da.concat([feat_set, da.constant(light_set)], axis=-1)
    enc2 = att.encode(x2, params.branch2.embed, params.branch2.blocks, mode, rng)
    f2 = att.pma_pool(enc2, params.branch2.pma, mode, rng)

    # fusion and image-space prediction
    def to_chw(f):
        return da.transpose(da.reshape(f, (b, h, w, cfg.d)), (0, 3, 1, 2))

    fused = da.concat(
        [to_chw(f1), to_chw(f2), da.constant(masks[:, None])], axis=1
    )  # (b, 2d+1, h, w)
    n_raw = _conv_bn_stack(fused, params.psi_convs, [], mode)
    n = _unit_rows(da.transpose(n_raw, (0, 2, 3, 1)))

    # single-view head on every light's feature map
    s_raw = _conv_bn_stack(x2_img, params.single_convs, params.single_bns, mode)
    s_raw = da.transpose(da.reshape(s_raw, (b, m, 3, h, w)), (0, 1, 3, 4, 2))
    n_single = _unit_rows(s_raw)

    # per-branch pooled-feature heads
    def agg_head(f, fcs):
        y = att.affine(da.leaky_relu(att.affine(f, fcs[0])), fcs[1])
        return _unit_rows(da.reshape(y, (b, h, w, 3)))

    return ForwardOutput(
        n=n,
        n_single=n_single,
        n_agg1=agg_head(f1, params.agg1),
        n_agg2=agg_head(f2, params.agg2),
        f1=da.reshape(f1, (b, h, w, cfg.d)),
        f2=da.reshape(f2, (b, h, w, cfg.d)),
    )


def normalize_normals(raw, mask) -> NormalMap:
    """Unit-scale rows inside the mask; zero-length rows fall back to
    (0, 0, 1); rows outside the mask are zeroed."""
    values = raw.values if isinstance(raw, DiffArray) else np.asarray(raw)
    orig_dtype = values.dtype
    values = values.astype(np.float64, copy=True)
    mask_b = np.asarray(mask) > 0
    norms = np.linalg.norm(values, axis=-1)
    out = np.zeros_like(values)
    good = mask_b & (norms > 1e-12)
    out[good] = values[good] / norms[good][:, None]
    degenerate = mask_b & ~good
    out[degenerate] = (0.0, 0.0, 1.0)
    return NormalMap(out.astype(orig_dtype), mask_b)


# ---------------------------------------------------------------------------
# checkpoint format


def _write_record(chunks, name: str, arr: np.ndarray) -> None:
    data = np.asarray(arr)
    encoded = name.encode("utf-8")
    chunks.append(pack_u64(len(encoded)))
    chunks.append(encoded)
    chunks.append(pack_u64(DTYPE_TAGS[data.dtype]))
    chunks.append(pack_u64(data.ndim))
    for extent in data.shape:
        chunks.append(pack_u64(extent))
    chunks.append(pack_array(data))


def _read_record(r: Reader):
    name_len = r.u64()
    name = r.take(name_len).decode("utf-8")
    tag = r.u64()
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}")
    rank = r.u64()
    shape = tuple(r.u64() for _ in range(rank))
    return name, read_array(r, TAG_DTYPES[tag], shape)


_CONFIG_FIELDS = ("channels", "d", "heads", "blocks", "phi_channels", "dropout_p")


def save_checkpoint(path, params: ModelParams, opt_state: Optional[dict] = None) -> None:
    """Write magic, a tensor count, one record per tensor (config scalars,
    parameters, running statistics), then the optimizer-state records in
    the same layout."""
    records = [(f"config.{k}", np.float64(getattr(params.config, k))) for k in _CONFIG_FIELDS]
    records += list(params.named_tensors())
    records += list(params.named_buffers())

    opt_records = []
    if opt_state is not None:
        opt_records.append(("step", np.float64(opt_state["step"])))
        for name, val in opt_state["m"].items():
            opt_records.append((f"m.{name}", val))
        for name, val in opt_state["v"].items():
            opt_records.append((f"v.{name}", val))

    chunks = [CKPT_MAGIC, pack_u64(len(records))]
    for name, tensor in records:
        _write_record(chunks, name, tensor.values if isinstance(tensor, DiffArray) else tensor)
    chunks.append(pack_u64(len(opt_records)))
    for name, arr in opt_records:
        _write_record(chunks, name, arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Tuple[ModelParams, Optional[dict]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CKPT_MAGIC) or not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    r = Reader(data, len(CKPT_MAGIC))

    n = r.u64()
    loaded = {}
    for _ in range(n):
        name, arr = _read_record(r)
        loaded[name] = arr

    cfg_kwargs = {}
    for key in _CONFIG_FIELDS:
        rec = loaded.pop(f"config.{key}", None)
        if rec is None:
            raise FormatError(f"{path}: missing config record config.{key}")
        cfg_kwargs[key] = float(rec) if key == "dropout_p" else int(rec)
    any_param = next(iter(loaded.values()))
    cfg_kwargs["dtype"] = "f32" if any_param.dtype == np.float32 else "f64"
    params = ModelParams(ModelConfig(**cfg_kwargs), seed=0)

    setters = params._buffer_setters()
    for name, tensor in params.named_tensors():
        arr = loaded.pop(name, None)
        if arr is None:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if arr.shape != tensor.shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {tuple(tensor.shape)}"
            )
        tensor.values = arr.astype(tensor.dtype)
    for name, (obj, attr) in setters.items():
        arr = loaded.pop(name, None)
        if arr is None:
            raise FormatError(f"{path}: missing buffer {name!r}")
        setattr(obj, attr, arr.astype(params.config.np_dtype))
    if loaded:
        raise FormatError(f"{path}: unexpected tensors {sorted(loaded)[:4]}")

    k = r.u64()
    opt_state = None
    if k:
        opt_records = dict(_read_record(r) for _ in range(k))
        step_rec = opt_records.pop("step", None)
        if step_rec is None:
            raise FormatError(f"{path}: optimizer state lacks a step record")
        opt_state = {"step": int(step_rec), "m": {}, "v": {}}
        for name, arr in opt_records.items():
            kind, _, pname = name.partition(".")
            if kind not in ("m", "v") or not pname:
                raise FormatError(f"{path}: bad optimizer record {name!r}")
            opt_state[kind][pname] = arr
    return params, opt_state
