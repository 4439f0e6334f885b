"""Loss, SGD, learning-rate schedule, train/eval loops and the throughput benchmark."""

from __future__ import annotations

import contextlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import save_checkpoint
from .data import AugmentConfig, DatasetHandle, augment, eval_transform, iterate_batches
from .models import ConfigError, Model, count_params, model_forward
from .tensor import GradientTape, ShapeError, Tensor, backward, log_softmax


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    optimizer: str = "sgd"
    momentum: float = 0.9
    batch_size: int = 32
    base_lr: float = 5e-2
    schedule: str = "cosine"
    weight_decay: float = 1e-4
    warmup_epochs: int = 3
    label_smooth: float = 0.1
    seed: int = 0
    deterministic: bool = False
    mixup: bool = True
    mixup_alpha: float = 0.8
    flip_probability: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigError(f"only the sgd optimizer is supported, got {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ConfigError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be in [0, epochs)")
        if not 0 <= self.label_smooth < 1:
            raise ConfigError("label_smooth must lie in [0, 1)")
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 100, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad value type in train config: {e}") from None

    def augment_config(self, image_size: int) -> AugmentConfig:
        return AugmentConfig(
            crop_scale_range=self.crop_scale,
            flip_probability=self.flip_probability,
            mixup_alpha=self.mixup_alpha,
            target_size=image_size,
            mixup=self.mixup,
        )


@dataclass
class Metrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    images_per_sec: float = 0.0
    wall_time: float = 0.0

    def log_record(self) -> dict:
        """Reproducible part of the record (timing lives in a separate log)."""
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy, "lr": self.lr}


@dataclass
class TrainResult:
    model: Model
    history: list[Metrics] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = -1


# ---------------------------------------------------------------------------
# loss / schedule / optimizer


def smoothed_ce_loss(logits: Tensor, targets, eps: float = 0.1) -> Tensor:
    """Mean over the batch of -sum(q * log_softmax(logits)), q = (1-eps)*targets + eps/K."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    k = logits.shape[-1]
    q = (1.0 - eps) * targets + eps / k
    return (log_softmax(logits, axis=-1) * q).sum() * (-1.0 / logits.shape[0])


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to exactly 0 at the last step."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    span = total - 1 - warmup
    if span <= 0:
        return cfg.base_lr
    t = min(max((step - warmup) / span, 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def decays(name: str, t: Tensor) -> bool:
    """Weight decay skips biases, norm affines, positional tables and the class token."""
    return t.ndim > 1 and not name.endswith("_pos") and not name.endswith("class_token")


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float, state: dict[str, np.ndarray]):
    """One SGD-with-momentum update. Returns (new params, new velocity state)."""
    new_params, new_state = {}, {}
    for name, w in params.items():
        g = grads.get(name)
        g = np.zeros_like(w.data) if g is None else np.asarray(g, dtype=w.dtype)
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        if weight_decay and decays(name, w):
            g = g + weight_decay * w.data
        v = state.get(name)
        v = g if v is None else momentum * v + g
        new_state[name] = v
        new_params[name] = Tensor(w.data - lr * v, requires_grad=w.requires_grad, dtype=w.dtype)
    return new_params, new_state


# ---------------------------------------------------------------------------
# loops


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for idx in iterate_batches(len(images), batch_size):
        out.append(model_forward(images[idx], model).data)
    return np.concatenate(out)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_top1(model: Model | Callable[[np.ndarray], np.ndarray], data: DatasetHandle,
                  aug: AugmentConfig | None = None, batch_size: int = 64) -> float:
    """Top-1 accuracy with the test pipeline (resize + normalize). Ties go to the lowest class."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(model, Model):
        aug = aug or AugmentConfig(target_size=model.config.image_size)
        # transform batch by batch: upsampled CIFAR at 224px would not fit in memory at once
        logits = np.concatenate([
            model_forward(eval_transform(data.images[idx], aug).astype(model.dtype), model).data
            for idx in iterate_batches(len(data), batch_size)
        ])
    else:
        logits = np.asarray(model(data.images))
    return top1_accuracy(logits, data.labels)


def _grad_map(model: Model, tape: GradientTape) -> dict[str, np.ndarray]:
    return {name: tape.gradient(t) for name, t in model.params.items()}


def _batch_stream(data: DatasetHandle, cfg: TrainConfig, aug: AugmentConfig, epoch: int,
                  workers: int):
    """Augmented batches for one epoch.

    Every batch draws from its own stream seeded by (seed, epoch, batch), so
    the output does not depend on how many workers prepare it.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

    def make(i):
        idx = batches[i]
        rng = np.random.default_rng([cfg.seed, epoch, i, 1])
        return augment(data.images[idx], data.labels[idx], data.num_classes, aug, rng)

    if workers <= 1:
        for i in range(len(batches)):
            yield make(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(make, range(len(batches)))


def train(model: Model, train_data: DatasetHandle, cfg: TrainConfig,
          eval_data: DatasetHandle | None = None, out_dir=None, workers: int = 1,
          on_epoch: Callable[[Metrics], None] | None = None) -> TrainResult:
    """Epoch loop: augment -> forward -> smoothed CE -> backward -> SGD step.

    Accuracy is measured on ``eval_data`` (or the training images through the
    test pipeline) after every epoch. With ``out_dir``, writes ``metrics.jsonl``
    (one record per epoch), ``timing.jsonl``, ``summary.json`` and the
    ``last.ntnt`` / ``best.ntnt`` checkpoints.
    """
    if model.config.num_classes != train_data.num_classes:
        raise ConfigError(
            f"model has {model.config.num_classes} classes, data has {train_data.num_classes}"
        )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    aug = cfg.augment_config(model.config.image_size)
    spe = math.ceil(len(train_data) / cfg.batch_size)
    model = model.with_grad(True)
    state: dict[str, np.ndarray] = {}
    result = TrainResult(model)
    step = 0
    with contextlib.ExitStack() as stack:
        if cfg.deterministic:
            stack.enter_context(threadpool_limits(limits=1))
        if out is not None:
            metrics_fh = stack.enter_context(open(out / "metrics.jsonl", "w"))
            timing_fh = stack.enter_context(open(out / "timing.jsonl", "w"))
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            losses = []
            for x, y in _batch_stream(train_data, cfg, aug, epoch, workers):
                with GradientTape() as tape:
                    logits = model_forward(x.astype(model.dtype), model)
                    loss = smoothed_ce_loss(logits, y, cfg.label_smooth)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
                backward(loss, tape)
                lr = lr_at(step, cfg, spe)
                params, state = sgd_step(model.params, _grad_map(model, tape), lr,
                                         cfg.momentum, cfg.weight_decay, state)
                model = Model(model.config, params)
                result.lr_history.append(lr)
                losses.append(loss.item())
                step += 1
            wall = time.perf_counter() - t0
            acc = evaluate_top1(model, eval_data if eval_data is not None else train_data,
                                aug, cfg.eval_batch_size)
            m = Metrics(epoch, float(np.mean(losses)), acc, result.lr_history[-1],
                        len(train_data) / wall if wall > 0 else 0.0, wall)
            result.history.append(m)
            if acc > result.best_accuracy:
                result.best_accuracy, result.best_epoch = acc, epoch
                if out is not None:
                    save_checkpoint(model, out / "best.ntnt")
            if out is not None:
                metrics_fh.write(json.dumps(m.log_record(), sort_keys=True) + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"epoch": epoch, "images_per_sec": m.images_per_sec,
                                            "wall_time": m.wall_time}) + "\n")
            if on_epoch is not None:
                on_epoch(m)
    result.model = model
    if out is not None:
        save_checkpoint(model, out / "last.ntnt")
        summary = {
            "epochs": cfg.epochs,
            "steps": step,
            "params": count_params(model),
            "final_accuracy": result.history[-1].accuracy,
            "best_accuracy": result.best_accuracy,
            "best_epoch": result.best_epoch,
            "final_loss": result.history[-1].loss,
            "train_config": asdict(cfg),
        }
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return result


@dataclass
class BenchResult:
    mean: float
    std: float
    samples: list[float]


def bench_throughput(model: Model, batch_size: int = 8, warmup_iters: int = 1,
                     timed_iters: int = 5, seed: int = 0) -> BenchResult:
    """Forward-only images/sec on a synthetic batch (no gradient tape)."""
    if warmup_iters < 1:
        raise ValueError("warmup_iters must be at least 1")
    if timed_iters < 1:
        raise ValueError("timed_iters must be at least 1")
    s = model.config.image_size
    x = np.random.default_rng(seed).standard_normal((batch_size, 3, s, s)).astype(model.dtype)
    plain = model.with_grad(False)
    for _ in range(warmup_iters):
        model_forward(x, plain)
    rates = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        model_forward(x, plain)
        rates.append(batch_size / (time.perf_counter() - t0))
    return BenchResult(float(np.mean(rates)), float(np.std(rates)), rates)
