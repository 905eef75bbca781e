"""Optimization loop: Adam updates over stacked patch batches with per-patch
light subsampling, periodic held-out evaluation, and checkpointing.

Determinism contract: every random decision at step t is drawn from a
generator seeded by (config.seed, t), so a fixed seed replays loss traces
exactly and a checkpoint resume continues bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffarray as da
from . import model as mdl
from .errors import ContractError, NumericError
from .objective import mean_angular_error, ps_transformer_loss
from .samples import PhotoSample


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m_train: int = 10
    patch_size: int = 8
    eval_interval: int = 200
    seed: int = 0
    checkpoint_path: Optional[str] = None
    heldout_count: int = 32
    resume_from: Optional[str] = None

    def __post_init__(self):
        positive = {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "m_train": self.m_train,
            "patch_size": self.patch_size,
            "eval_interval": self.eval_interval,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ContractError(f"{name} must be positive, got {value}")


@dataclass
class TrainLog:
    """Append-only record of per-step losses and per-eval errors."""

    steps: List[dict] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    path: Optional[str] = None
    _fh: object = None

    def open(self):
        if self.path:
            self._fh = open(self.path, "w", encoding="utf-8")
        return self

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def log_step(self, step: int, breakdown: dict) -> None:
        rec = {"step": step, **breakdown, "time": time.time()}
        self.steps.append(rec)
        if self._fh:
            self._fh.write(
                "step={step} main={main:.6g} single={single:.6g} "
                "agg1={agg1:.6g} agg2={agg2:.6g} total={total:.6g}\n".format(**rec)
            )
            self._fh.flush()

    def log_eval(self, step: int, mae_deg: float) -> None:
        rec = {"step": step, "mae_deg": mae_deg, "time": time.time()}
        self.evals.append(rec)
        if self._fh:
            self._fh.write(f"eval step={step} mae_deg={mae_deg:.6g}\n")
            self._fh.flush()

    def total_trace(self) -> List[float]:
        return [r["total"] for r in self.steps]


def init_adam_state(params: mdl.ModelParams) -> dict:
    return {
        "step": 0,
        "m": {name: np.zeros_like(t.values) for name, t in params.named_tensors()},
        "v": {name: np.zeros_like(t.values) for name, t in params.named_tensors()},
    }


def adam_step(
    params: mdl.ModelParams,
    grads: dict,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place; increments the step counter."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, tensor in params.named_tensors():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for {name!r}")
        if g.shape != tensor.values.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {tensor.values.shape} for {name!r}"
            )
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.values -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.dtype)


def _step_rng(seed: int, step: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, step, salt])


def _draw_batch(
    patches: Sequence[PhotoSample], config: TrainConfig, rng: np.random.Generator
) -> List[PhotoSample]:
    idx = rng.choice(len(patches), size=config.batch_size, replace=len(patches) < config.batch_size)
    batch = []
    for i in idx:
        patch = patches[int(i)]
        if patch.m < config.m_train:
            raise ContractError(
                f"patch has {patch.m} lights, training needs {config.m_train}"
            )
        keep = rng.choice(patch.m, size=config.m_train, replace=False)
        batch.append(patch.subset_lights(np.sort(keep)))
    return batch


def split_heldout(
    patches: Sequence[PhotoSample], config: TrainConfig
) -> Tuple[List[PhotoSample], List[PhotoSample]]:
    """Deterministic split: a shuffled prefix is held out for evaluation."""
    if not patches:
        raise ContractError("dataset is empty")
    order = np.random.default_rng([config.seed, 0x4E1D]).permutation(len(patches))
    k = min(config.heldout_count, max(1, len(patches) // 10))
    held = [patches[int(i)] for i in order[:k]]
    train = [patches[int(i)] for i in order[k:]] or held
    return train, held


def _heldout_mae(params: mdl.ModelParams, held: Sequence[PhotoSample], config: TrainConfig, step: int) -> float:
    rng = _step_rng(config.seed, step, salt=7)
    errors = []
    for patch in held:
        m_eval = min(patch.m, config.m_train)
        keep = rng.choice(patch.m, size=m_eval, replace=False)
        sub = patch.subset_lights(np.sort(keep))
        out = mdl.forward(sub, params, "eval")
        pred = mdl.normalize_normals(out.n, sub.mask)
        if not (sub.mask > 0).any():
            continue
        errors.append(mean_angular_error(pred.normals, sub.normals, sub.mask))
    if not errors:
        raise ContractError("held-out set has no masked pixels")
    return float(np.mean(errors))


def train(
    config: TrainConfig,
    patches: Sequence[PhotoSample],
    model_config: Optional[mdl.ModelConfig] = None,
    log_path: Optional[str] = None,
) -> Tuple[mdl.ModelParams, TrainLog]:
    """Run the optimization loop over a patch dataset.

    Each step draws a batch, subsamples exactly m_train distinct lights per
    patch, runs one stacked train-mode forward/backward, and applies Adam.
    Held-out MAE is evaluated every eval_interval steps and the checkpoint
    is rewritten whenever it improves (and at the end, with optimizer state
    for resume).
    """
    train_patches, held = split_heldout(patches, config)

    start_step = 0
    if config.resume_from:
        params, opt_state = mdl.load_checkpoint(config.resume_from)
        if opt_state is None:
            raise ContractError(f"{config.resume_from} has no optimizer state to resume from")
        start_step = opt_state["step"]
    else:
        params = mdl.ModelParams(model_config or mdl.ModelConfig(), seed=config.seed)
        opt_state = init_adam_state(params)

    log = TrainLog(path=log_path).open()
    tensors = params.tensor_dict()
    best_mae = float("inf")
    try:
        for step in range(start_step + 1, config.steps + 1):
            rng = _step_rng(config.seed, step)
            batch = _draw_batch(train_patches, config, rng)

            params.zero_grads()
            with da.Tape() as tape:
                out = mdl.forward_many(batch, params, "train", rng)
                gt = np.stack([p.normals for p in batch])
                mask = np.stack([p.mask for p in batch])
                breakdown = ps_transformer_loss(out, gt, mask)
                terms = breakdown.floats()
                for term, value in terms.items():
                    if not np.isfinite(value):
                        raise NumericError(
                            f"loss term {term!r} became non-finite at step {step}"
                        )
                tape.backward(breakdown.total, params=tensors.values())
            grads = {name: t.grad for name, t in tensors.items()}
            adam_step(
                params, grads, opt_state, config.lr, config.beta1, config.beta2, config.adam_eps
            )
            log.log_step(step, terms)

            if step % config.eval_interval == 0 or step == config.steps:
                mae = _heldout_mae(params, held, config, step)
                log.log_eval(step, mae)
                if config.checkpoint_path and mae < best_mae:
                    best_mae = mae
                    mdl.save_checkpoint(config.checkpoint_path, params, opt_state)
        if config.checkpoint_path:
            mdl.save_checkpoint(config.checkpoint_path, params, opt_state)
    finally:
        log.close()
    return params, log


def evaluate(
    params: mdl.ModelParams,
    samples: Sequence[PhotoSample],
    m_eval: int,
    trials: int,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[List[float], float]:
    """Fixed-light-set evaluation protocol.

    Each trial draws one set of m_eval light indices and reuses it for every
    sample; the trial's MAE is the mean of per-sample MAEs. Returns
    (per-trial values, their mean).
    """
    if trials < 1:
        raise ContractError("need at least one trial")
    if not samples:
        raise ContractError("no samples to evaluate")
    rng = rng if rng is not None else np.random.default_rng()
    available = min(s.m for s in samples)
    if m_eval > available:
        raise ContractError(
            f"m_eval={m_eval} exceeds the {available} lights available in some sample"
        )
    per_trial = []
    for _ in range(trials):
        keep = np.sort(rng.choice(available, size=m_eval, replace=False))
        errors = []
        for sample in samples:
            sub = sample.subset_lights(keep)
            out = mdl.forward(sub, params, "eval")
            pred = mdl.normalize_normals(out.n, sub.mask)
            errors.append(mean_angular_error(pred.normals, sub.normals, sub.mask))
        per_trial.append(float(np.mean(errors)))
    return per_trial, float(np.mean(per_trial))
