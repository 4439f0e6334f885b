"""Command-line entry point: ``nested-tnt {train,eval,params,gradcheck,bench}``.

Value precedence, highest first: command-line flag, ``NTNT_*`` environment
variable, JSON config file, built-in default. Exit codes: 0 success, 2 config
error, 3 data error (including unreadable checkpoints), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, load_cifar, load_folder_dataset, one_hot, synthetic_dataset
from .gradcheck import activate, model_grad_check
from .models import ConfigError, Model, ModelConfig, build_model, count_params
from .train import DivergenceError, TrainConfig, bench_throughput, evaluate_top1, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
DATASET_KINDS = ("cifar10", "cifar100", "folder", "synthetic")
S_CONFIGS = (("ViT", "vit_s.json"), ("TNT", "tnt_s.json"), ("Nested-TNT", "nested_tnt_s.json"))
ENV_PREFIX = "NTNT_"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def bundled(name: str) -> Path:
    return Path(str(resources.files("nested_tnt") / "configs" / name))


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_CONFIG, "config", f"{what} {p} does not exist")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, "config", f"{what} {p} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise CliError(EXIT_CONFIG, "config", f"{what} {p} must hold a JSON object")
    return d


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name)


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from NTNT_* environment variables."""
    env_map = {"seed": "SEED", "out": "OUT", "data": "DATA", "dataset_kind": "DATASET_KIND",
               "workers": "WORKERS", "checkpoint": "CHECKPOINT", "config": "CONFIG",
               "model_config": "MODEL_CONFIG"}
    for attr, var in env_map.items():
        if getattr(args, attr, None) is None and _env(var) is not None:
            value = _env(var)
            setattr(args, attr, int(value) if attr in ("seed", "workers") else value)
    if not args.deterministic and _env("DETERMINISTIC") is not None:
        args.deterministic = _env("DETERMINISTIC").lower() in ("1", "true", "yes")
    if args.dataset_kind is not None and args.dataset_kind not in DATASET_KINDS:
        raise CliError(EXIT_CONFIG, "config", f"unknown dataset kind {args.dataset_kind!r}")
    return args


def _model_config(path) -> ModelConfig:
    return ModelConfig.from_dict(_read_json(path, "model config"))


def _train_config(args) -> TrainConfig:
    d = _read_json(args.config, "train config") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.deterministic:
        d["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def _datasets(args, image_size: int):
    kind = args.dataset_kind or "synthetic"
    if kind == "synthetic":
        size = image_size
        return (synthetic_dataset(64, size, seed=0), synthetic_dataset(64, size, seed=1))
    if not args.data:
        raise CliError(EXIT_DATA, "data", f"--data is required for dataset kind {kind}")
    if not Path(args.data).exists():
        raise CliError(EXIT_DATA, "data", f"dataset path {args.data} does not exist")
    if kind == "folder":
        root = Path(args.data)
        if (root / "train").is_dir() and (root / "test").is_dir():
            return load_folder_dataset(root / "train"), load_folder_dataset(root / "test", "test")
        ds = load_folder_dataset(root)
        return ds, ds
    return load_cifar(args.data, kind, "train"), load_cifar(args.data, kind, "test")


def _emit(args, name: str, payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _finetune_start(model: Model, num_classes: int, seed: int) -> Model:
    """Every layer stays trainable; only a head of the wrong width is replaced."""
    if model.config.num_classes == num_classes:
        return model
    cfg = dataclasses.replace(model.config, num_classes=num_classes)
    fresh = build_model(cfg, seed, model.dtype)
    return Model(cfg, {k: fresh.params[k] if k.startswith("head.") else v
                       for k, v in model.params.items()})


def cmd_train(args) -> int:
    if not args.model_config and not args.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "train needs --model-config or --checkpoint")
    if not args.out:
        raise CliError(EXIT_CONFIG, "config", "train needs --out")
    tcfg = _train_config(args)
    start = load_checkpoint(args.checkpoint) if args.checkpoint else None
    mcfg = start.config if start is not None else _model_config(args.model_config)
    train_ds, eval_ds = _datasets(args, mcfg.image_size)
    if args.dataset_kind in (None, "synthetic"):
        eval_ds = train_ds
    if start is not None:
        model = _finetune_start(start, train_ds.num_classes, tcfg.seed)
    else:
        model = build_model(mcfg, tcfg.seed)
    result = train(model, train_ds, tcfg, eval_ds, args.out, workers=args.workers or 1)
    print(json.dumps({"epochs": len(result.history),
                      "final_accuracy": result.history[-1].accuracy,
                      "best_accuracy": result.best_accuracy,
                      "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    _, test_ds = _datasets(args, model.config.image_size)
    acc = evaluate_top1(model, test_ds)
    _emit(args, "eval.json", {"checkpoint": str(args.checkpoint), "samples": len(test_ds),
                              "top1": acc, "variant": model.config.variant})
    return EXIT_OK


def cmd_params(args) -> int:
    rows = []
    configs = ([("model", args.model_config)] if args.model_config
               else [(label, bundled(f)) for label, f in S_CONFIGS])
    for label, path in configs:
        n = count_params(build_model(_model_config(path), 0))
        rows.append({"model": label, "params": n, "params_m": round(n / 1e6, 2)})
    print(f"{'Models':<12}{'Params':>12}{'Params(M)':>12}")
    for r in rows:
        print(f"{r['model']:<12}{r['params']:>12}{r['params_m']:>12.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _model_config(args.model_config or bundled("minimal.json"))
    seed = args.seed if args.seed is not None else 0
    model = activate(build_model(cfg, seed), seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(1, 3, cfg.image_size, cfg.image_size))
    targets = one_hot(rng.integers(0, cfg.num_classes, size=1), cfg.num_classes)
    report = model_grad_check(model, images, targets)
    worst_name = max(report, key=report.get)
    worst = float(report[worst_name])
    passed = bool(worst < GRADCHECK_TOL)
    _emit(args, "gradcheck.json", {"max_relative_error": worst, "worst_parameter": worst_name,
                                   "tolerance": GRADCHECK_TOL, "passed": passed,
                                   "parameters_checked": len(report)})
    if not passed:
        raise CliError(EXIT_NUMERIC, "gradcheck", f"max relative error {worst:.3e} >= {GRADCHECK_TOL}")
    return EXIT_OK


def cmd_bench(args) -> int:
    configs = ([("model", args.model_config)] if args.model_config
               else [(label, bundled(f)) for label, f in S_CONFIGS])
    rows = []
    for label, path in configs:
        model = build_model(_model_config(path), args.seed or 0)
        r = bench_throughput(model, args.batch_size, args.warmup_iters, args.timed_iters)
        rows.append({"model": label, "im_per_sec": r.mean, "std": r.std})
    print(f"{'Model':<12}{'im/sec':>12}{'std':>10}")
    for r in rows:
        print(f"{r['model']:<12}{r['im_per_sec']:>12.2f}{r['std']:>10.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "params": cmd_params,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nested-tnt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="train config JSON")
        p.add_argument("--model-config", help="model config JSON")
        p.add_argument("--data", help="dataset path")
        p.add_argument("--dataset-kind", help="one of " + ", ".join(DATASET_KINDS))
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded numerics, reproducible output")
        p.add_argument("--workers", type=int, help="data-pipeline worker threads")
        p.add_argument("--checkpoint", help="checkpoint to evaluate (eval) or fine-tune from (train)")
        if name == "train":
            p.add_argument("--epochs", type=int, help="override the config's epoch count")
        if name == "bench":
            p.add_argument("--batch-size", type=int, default=2)
            p.add_argument("--warmup-iters", type=int, default=1)
            p.add_argument("--timed-iters", type=int, default=3)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _resolve(args)
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=1):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except CliError as e:
        return _fail(e.code, e.kind, str(e))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except (DataError, CheckpointError, OSError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    except (DivergenceError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, "numerical", str(e))


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
