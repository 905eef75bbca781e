"""Command-line surface tying the system together.

Subcommands: gen (synthetic datasets), train, eval (fixed-light-set trials),
infer (normal-map PNG from a checkpoint), oracle (classical solver), and
gradcheck (f64 gradient suite). Every subcommand ends with a machine
readable `RESULT key=value ...` line. Exit codes: 0 success, 1 usage error,
2 data/contract error.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

import numpy as np

from . import classic
from . import model as mdl
from . import synthdata as sd
from . import trainer as tr
from . import verify
from .errors import PstError, UsageError
from .objective import mean_angular_error

_THREAD_LIMIT = None  # keeps the threadpoolctl context alive for the process


def _apply_thread_cap() -> None:
    global _THREAD_LIMIT
    raw = os.environ.get("PST_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"PST_THREADS must be an integer, got {raw!r}")
    if cap <= 0:
        return  # 0 = auto
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMIT = threadpool_limits(limits=cap)
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", str(cap))
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(cap))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _result(**kv) -> None:
    print("RESULT " + " ".join(f"{k}={v}" for k, v in kv.items()))


# ---------------------------------------------------------------------------
# config file handling

# key -> (target, attribute, converter)
_CONFIG_KEYS = {
    "steps": ("train", "steps", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "m_train": ("train", "m_train", int),
    "patch_size": ("train", "patch_size", int),
    "eval_interval": ("train", "eval_interval", int),
    "seed": ("train", "seed", int),
    "heldout_count": ("train", "heldout_count", int),
    "channels": ("model", "channels", int),
    "d": ("model", "d", int),
    "heads": ("model", "heads", int),
    "blocks": ("model", "blocks", int),
    "phi_channels": ("model", "phi_channels", int),
    "dropout_p": ("model", "dropout_p", float),
    "dtype": ("model", "dtype", str),
}


def parse_config_file(path: str) -> dict:
    """Flat `key = value` text; `#` starts a comment; unknown keys are
    rejected by name."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected `key = value`, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            _, _, conv = _CONFIG_KEYS[key]
            try:
                values[key] = conv(value.strip())
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {value.strip()!r}")
    return values


def _build_configs(args) -> tuple:
    values = parse_config_file(args.config) if args.config else {}
    # command-line overrides win over file values
    for key in _CONFIG_KEYS:
        flag = getattr(args, f"opt_{key}", None)
        if flag is not None:
            values[key] = flag
    train_kwargs = {}
    model_kwargs = {}
    for key, value in values.items():
        target, attr, _ = _CONFIG_KEYS[key]
        (train_kwargs if target == "train" else model_kwargs)[attr] = value
    return train_kwargs, model_kwargs


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    paths = []
    for i in range(args.count):
        if args.kind == "mixed":
            kind = "sphere" if i % 2 == 0 else "blob"
        else:
            kind = args.kind
        if args.specular < 0:
            ks = 0.0 if i % 2 == 0 else float(np.round(rng.uniform(0.05, 0.5), 6))
            shin = float(np.round(rng.uniform(8.0, 256.0), 3))
        else:
            ks = args.specular
            shin = args.shininess
        spec = sd.SceneSpec(
            kind=kind,
            height=args.size,
            width=args.size,
            channels=args.channels,
            specular=ks,
            shininess=shin,
            noise=args.noise,
            seed=args.seed * 1_000_003 + i,
            min_nz=args.min_nz,
        )
        lights = sd.sample_lights(args.lights, min_z=args.min_z, rng=np.random.default_rng([args.seed, i]))
        sample = sd.render_sample(spec, lights)
        name = f"sample_{i:04d}.psamp"
        sd.write_sample(os.path.join(args.out, name), sample)
        paths.append(name)
    sd.write_manifest(
        args.out,
        paths,
        config={
            "count": args.count,
            "kind": args.kind,
            "size": args.size,
            "lights": args.lights,
            "min_z": args.min_z,
            "noise": args.noise,
            "channels": args.channels,
            "seed": args.seed,
        },
    )
    _result(count=len(paths), out=args.out)
    return 0


def _load_dataset(data_dir: str) -> List:
    manifest = sd.read_manifest(data_dir)
    return manifest.load_all()


def _cmd_train(args) -> int:
    train_kwargs, model_kwargs = _build_configs(args)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    config = tr.TrainConfig(checkpoint_path=ckpt, resume_from=args.resume, **train_kwargs)
    model_config = mdl.ModelConfig(**model_kwargs)

    samples = _load_dataset(args.data)
    patches = []
    for sample in samples:
        patches.extend(
            sd.extract_patches(sample, size=config.patch_size, stride=config.patch_size)
        )
    log_path = os.path.join(args.out, "train.log")
    params, log = tr.train(config, patches, model_config=model_config, log_path=log_path)
    final_total = log.steps[-1]["total"] if log.steps else float("nan")
    best_mae = min((r["mae_deg"] for r in log.evals), default=float("nan"))
    _result(
        steps=config.steps,
        patches=len(patches),
        final_total=f"{final_total:.6g}",
        best_mae_deg=f"{best_mae:.4f}",
        ckpt=ckpt,
        log=log_path,
    )
    return 0


def _cmd_eval(args) -> int:
    params, _ = mdl.load_checkpoint(args.ckpt)
    samples = _load_dataset(args.data)
    per_trial, mean = tr.evaluate(
        params, samples, m_eval=args.m, trials=args.trials, rng=np.random.default_rng(args.seed)
    )
    for t, mae in enumerate(per_trial, 1):
        print(f"trial {t}: mae_deg={mae:.4f}")
    print(f"mean over {args.trials} trials: mae_deg={mean:.4f}")
    _result(trials=args.trials, m=args.m, mean_mae_deg=f"{mean:.4f}")
    return 0


def _subsample_lights(sample, m: int, seed: int):
    if m > sample.m:
        raise UsageError(f"--m {m} exceeds the {sample.m} lights stored in the sample")
    keep = np.sort(np.random.default_rng(seed).choice(sample.m, size=m, replace=False))
    return sample.subset_lights(keep)


def _cmd_infer(args) -> int:
    params, _ = mdl.load_checkpoint(args.ckpt)
    sample = sd.read_sample(args.sample)
    sub = _subsample_lights(sample, args.m, args.seed) if args.m else sample
    out = mdl.forward(sub, params, "eval")
    pred = mdl.normalize_normals(out.n, sub.mask)
    sd.export_normal_png(args.out, pred)
    extra = {}
    if sub.normals is not None and (sub.mask > 0).any():
        extra["mae_deg"] = f"{mean_angular_error(pred.normals, sub.normals, sub.mask):.4f}"
    _result(out=args.out, m=sub.m, **extra)
    return 0


def _cmd_oracle(args) -> int:
    sample = sd.read_sample(args.sample)
    normal_map = classic.solve_map(sample)
    sd.export_normal_png(args.out, normal_map)
    extra = {}
    if sample.normals is not None and (sample.mask > 0).any():
        extra["mae_deg"] = f"{mean_angular_error(normal_map.normals, sample.normals, sample.mask):.4f}"
    _result(out=args.out, **extra)
    return 0


def _cmd_gradcheck(args) -> int:
    prim = verify.primitive_grad_suite(seed=args.seed)
    for name, err in sorted(prim.items()):
        print(f"primitive {name}: max_rel_error={err:.3e}")
    worst_prim = max(prim.values())
    model_err = verify.model_grad_check(
        max_coords_per_tensor=args.coords, seed=args.seed
    )
    print(f"reduced model: max_rel_error={model_err:.3e}")
    _result(
        max_rel_error_primitives=f"{worst_prim:.3e}",
        max_rel_error_model=f"{model_err:.3e}",
    )
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="pst", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--kind", choices=("sphere", "blob", "mixed"), default="sphere")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--lights", type=int, default=10)
    gen.add_argument("--min-z", dest="min_z", type=float, default=0.2)
    gen.add_argument("--min-nz", dest="min_nz", type=float, default=0.05,
                     help="sphere mask keeps pixels whose normal z exceeds this")
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--channels", type=int, default=3)
    gen.add_argument("--specular", type=float, default=-1.0,
                     help="fixed k_s; negative alternates diffuse/glossy")
    gen.add_argument("--shininess", type=float, default=32.0)
    gen.set_defaults(func=_cmd_gen)

    train = sub.add_parser("train", help="train on a dataset directory")
    train.add_argument("--config", default=None)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", default=None)
    for key, (_, _, conv) in _CONFIG_KEYS.items():
        train.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", type=conv, default=None)
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="fixed-light-set evaluation trials")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--m", type=int, required=True)
    ev.add_argument("--trials", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_cmd_eval)

    infer = sub.add_parser("infer", help="predict a normal map PNG from a sample file")
    infer.add_argument("--ckpt", required=True)
    infer.add_argument("--sample", required=True)
    infer.add_argument("--m", type=int, default=0, help="use this many lights (0 = all)")
    infer.add_argument("--out", required=True)
    infer.add_argument("--seed", type=int, default=0)
    infer.set_defaults(func=_cmd_infer)

    oracle = sub.add_parser("oracle", help="classical least-squares solution PNG")
    oracle.add_argument("--sample", required=True)
    oracle.add_argument("--out", required=True)
    oracle.set_defaults(func=_cmd_oracle)

    grad = sub.add_parser("gradcheck", help="run the f64 gradient verification suite")
    grad.add_argument("--coords", type=int, default=8, help="coordinates probed per tensor")
    grad.add_argument("--seed", type=int, default=0)
    grad.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv: List[str]) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    try:
        _apply_thread_cap()
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except PstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


def main(argv: Optional[List[str]] = None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
