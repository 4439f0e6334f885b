"""Finite-difference audit of full-model gradients."""

from __future__ import annotations

import numpy as np

from .models import Model, model_forward
from .tensor import GradientTape, Tensor, backward
from .train import smoothed_ce_loss


def activate(model: Model, seed: int = 0, scale: float = 0.3) -> Model:
    """Float64 copy with every parameter jittered.

    Zero-initialized tensors (fusion output layers, biases) otherwise hide
    whole gradient paths, e.g. the one through the previous layer's logits.
    """
    rng = np.random.default_rng(seed)
    return Model(model.config, {
        k: Tensor(v.data.astype(np.float64) + rng.normal(0.0, scale, v.shape), dtype=np.float64)
        for k, v in model.params.items()
    })


def model_grad_check(model: Model, images: np.ndarray, targets: np.ndarray,
                     eps: float = 0.1, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter tensor, |a - n| / max(1, |a|), in float64."""
    model = model.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)

    def loss_of(params) -> float:
        return smoothed_ce_loss(model_forward(images, Model(model.config, params)),
                                targets, eps).item()

    trainable = model.with_grad(True)
    with GradientTape() as tape:
        loss = smoothed_ce_loss(model_forward(images, trainable), targets, eps)
    backward(loss, tape)

    report = {}
    for name, t in trainable.params.items():
        analytic = tape.gradient(t)
        analytic = np.zeros(t.shape) if analytic is None else analytic
        base = t.data.reshape(-1)
        worst = 0.0
        for i in range(base.size):
            probe = base.copy()
            probe[i] += h
            plus = loss_of({**model.params, name: Tensor(probe.reshape(t.shape), dtype=np.float64)})
            probe[i] -= 2 * h
            minus = loss_of({**model.params, name: Tensor(probe.reshape(t.shape), dtype=np.float64)})
            numeric = (plus - minus) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        report[name] = worst
    return report
