import dataclasses
import math

import numpy as np
import pytest

from nested_tnt.data import DatasetHandle, synthetic_dataset
from nested_tnt.models import ConfigError, Model, ModelConfig, build_model
from nested_tnt.tensor import GradientTape, ShapeError, Tensor, backward, grad_check
from nested_tnt.train import (
    DivergenceError,
    TrainConfig,
    bench_throughput,
    decays,
    evaluate_top1,
    lr_at,
    sgd_step,
    smoothed_ce_loss,
    top1_accuracy,
    train,
)

F64 = np.float64
TINY = ModelConfig(variant="nested_tnt", image_size=8, patch_size=4, word_size=2, outer_dim=16,
                   inner_dim=8, outer_heads=2, inner_heads=2, depth=2, num_classes=2, fusion_hidden=4)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# --- loss --------------------------------------------------------------------


def test_loss_uniform_logits_ten_classes():
    target = np.eye(10)[[3]]
    assert abs(smoothed_ce_loss(t64(np.zeros((1, 10))), target).item() - math.log(10)) < 1e-12


def test_loss_saturates_without_smoothing():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert smoothed_ce_loss(t64(logits), np.eye(5)[[2]], eps=0.0).item() < 1e-6


def test_loss_two_class_uniform_prediction():
    assert abs(smoothed_ce_loss(t64([[0.0, 0.0]]), [[1.0, 0.0]], 0.1).item() - math.log(2)) < 1e-12


def test_loss_plain_cross_entropy_when_unsmoothed():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, 4)
    ce = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    assert smoothed_ce_loss(t64(logits), np.eye(6)[labels], eps=0.0).item() == pytest.approx(ce, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_is_softmax_minus_q(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(1, 7))
    target = rng.dirichlet(np.ones(7))[None]
    q = 0.9 * target + 0.1 / 7
    x = t64(logits, grad=True)
    with GradientTape() as tape:
        loss = smoothed_ce_loss(x, target)
    backward(loss, tape)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    np.testing.assert_allclose(tape.gradient(x), p - q, atol=1e-12)
    assert grad_check(lambda z: smoothed_ce_loss(z, target), t64(logits)) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        smoothed_ce_loss(t64(np.zeros((2, 3))), np.zeros((2, 4)))


# --- schedule ----------------------------------------------------------------

SCHED = TrainConfig(epochs=10, warmup_epochs=3, base_lr=5e-2)
SPE = 7


def test_lr_end_of_warmup():
    w = 3 * SPE
    assert abs(lr_at(w - 1, SCHED, SPE) - 5e-2) < 1e-12
    assert abs(lr_at(w, SCHED, SPE) - 5e-2) < 1e-12


def test_lr_warmup_is_linear():
    assert lr_at(0, SCHED, SPE) == pytest.approx(5e-2 / 21, abs=1e-15)
    assert lr_at(10, SCHED, SPE) == pytest.approx(5e-2 * 11 / 21, abs=1e-15)


def test_lr_cosine_midpoint():
    w, total = 3 * SPE, 10 * SPE
    mid = w + (total - 1 - w) / 2
    assert mid == int(mid)
    assert abs(lr_at(int(mid), SCHED, SPE) - 2.5e-2) < 1e-12


def test_lr_final_step_zero():
    assert abs(lr_at(10 * SPE - 1, SCHED, SPE)) < 1e-12


def test_lr_monotone_after_warmup():
    lrs = [lr_at(s, SCHED, SPE) for s in range(3 * SPE, 10 * SPE)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# --- optimizer ---------------------------------------------------------------


def test_sgd_plain_step():
    p, _ = sgd_step({"w": t64([1.0, 1.0])}, {"w": np.array([0.5, 0.5])}, 0.1, 0.0, 0.0, {})
    np.testing.assert_allclose(p["w"].data, 0.95, atol=1e-15)


def test_sgd_momentum_recurrence():
    params, state = {"w": t64([[2.0]])}, {}
    history = [2.0]
    for _ in range(2):
        params, state = sgd_step(params, {"w": np.ones((1, 1))}, 0.1, 0.9, 0.0, state)
        history.append(params["w"].item())
    assert history[0] - history[1] == pytest.approx(0.1, abs=1e-12)
    assert history[1] - history[2] == pytest.approx(0.19, abs=1e-12)


def test_sgd_weight_decay_only():
    params, _ = sgd_step({"w": t64([[3.0, -2.0]])}, {"w": np.zeros((1, 2))}, 0.1, 0.0, 1e-4, {})
    np.testing.assert_allclose(params["w"].data, [[3.0 * (1 - 1e-5), -2.0 * (1 - 1e-5)]], rtol=1e-15)


def test_sgd_vanilla_gradient_descent():
    rng = np.random.default_rng(0)
    w, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    params, state = {"w": t64(w)}, {}
    for _ in range(3):
        params, state = sgd_step(params, {"w": g}, 0.05, 0.0, 0.0, state)
        w = w - 0.05 * g
        np.testing.assert_array_equal(params["w"].data, w)


def test_weight_decay_exclusions():
    m = np.zeros((2, 2))
    assert decays("blocks.0.outer.attn.w_q", t64(m))
    assert not decays("blocks.0.outer.mlp.fc1.bias", t64(np.zeros(2)))
    assert not decays("embed.sentence_pos", t64(m))
    assert not decays("embed.class_token", t64(m))


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"w": t64([1.0])}, {"w": np.zeros(2)}, 0.1, 0.0, 0.0, {})


# --- evaluation --------------------------------------------------------------


def _balanced(k=10, per=3):
    labels = np.repeat(np.arange(k), per)
    return DatasetHandle(np.zeros((len(labels), 3, 8, 8), np.float32), labels, k)


def test_eval_constant_predictor():
    ds = _balanced()
    assert evaluate_top1(lambda x: np.tile(np.eye(10)[0], (len(x), 1)), ds) == pytest.approx(0.1)


def test_eval_perfect_oracle():
    ds = _balanced()
    assert evaluate_top1(lambda x: np.eye(10)[ds.labels], ds) == 1.0


def test_eval_three_of_four():
    logits = np.array([[2, 1], [0, 3], [5, 1], [1, 4]])
    assert top1_accuracy(logits, np.array([0, 1, 0, 0])) == 0.75


def test_eval_constant_model_through_pipeline():
    cfg = dataclasses.replace(TINY, num_classes=10)
    model = build_model(cfg, 0)
    bias = np.zeros(10, np.float32)
    bias[0] = 1.0
    params = {**model.params, "head.weight": Tensor(np.zeros((16, 10))), "head.bias": Tensor(bias)}
    assert evaluate_top1(Model(cfg, params), _balanced()) == pytest.approx(0.1)


def test_eval_empty_dataset():
    with pytest.raises(ValueError):
        evaluate_top1(lambda x: x, _balanced(per=0))


# --- training loop -----------------------------------------------------------


def test_lr_history_matches_schedule(convergence_run):
    cfg, data, result = convergence_run
    spe = math.ceil(len(data) / cfg.batch_size)
    assert len(result.lr_history) == cfg.epochs * spe
    assert result.lr_history == [lr_at(s, cfg, spe) for s in range(cfg.epochs * spe)]
    assert [m.lr for m in result.history] == result.lr_history[spe - 1::spe]


def test_convergence_fixture(convergence_run):
    _, _, result = convergence_run
    assert result.history[-1].accuracy >= 0.95
    assert result.best_accuracy == 1.0


SHORT = TrainConfig(epochs=4, batch_size=16, warmup_epochs=1, seed=3, deterministic=True)


def test_training_deterministic():
    data = synthetic_dataset(32, 8, 0)
    a = train(build_model(TINY, 3), data, SHORT)
    b = train(build_model(TINY, 3), data, SHORT)
    assert [m.loss for m in a.history] == [m.loss for m in b.history]
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)


def test_training_independent_of_worker_count():
    data = synthetic_dataset(32, 8, 0)
    a = train(build_model(TINY, 3), data, SHORT, workers=1)
    b = train(build_model(TINY, 3), data, SHORT, workers=3)
    assert [m.loss for m in a.history] == [m.loss for m in b.history]


def test_training_writes_artifacts(tmp_path):
    train(build_model(TINY, 0), synthetic_dataset(32, 8, 0), SHORT, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.ntnt", "last.ntnt", "metrics.jsonl", "summary.json", "timing.jsonl"]
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 4


def test_divergence_guard():
    model = build_model(TINY, 0)
    params = dict(model.params)
    params["head.bias"] = Tensor(np.array([np.nan, 0.0]))
    with pytest.raises(DivergenceError):
        train(Model(TINY, params), synthetic_dataset(16, 8), SHORT)


def test_class_count_mismatch():
    with pytest.raises(ConfigError):
        train(build_model(TINY, 0), _balanced(), SHORT)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adamw")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig.from_dict({"lr": 0.1})
    assert TrainConfig.finetune().epochs == 100


@pytest.mark.xfail(strict=True, reason="post-warmup epoch losses regress more often than the "
                   "10% allowance on this fixture; recorded as an unmet property")
def test_loss_monotone_after_warmup(convergence_run):
    cfg, _, result = convergence_run
    losses = [m.loss for m in result.history[cfg.warmup_epochs:]]
    regressions = [(b - a) / a for a, b in zip(losses, losses[1:]) if b > a]
    assert len(regressions) <= 0.1 * (len(losses) - 1)
    assert all(r < 0.05 for r in regressions)


# --- benchmark ---------------------------------------------------------------


def test_bench_positive_finite():
    r = bench_throughput(build_model(TINY, 0), batch_size=2, timed_iters=2)
    assert r.mean > 0 and math.isfinite(r.mean) and len(r.samples) == 2


def test_bench_deeper_is_slower():
    shallow = dataclasses.replace(TINY, image_size=16, depth=3)
    deep = dataclasses.replace(shallow, depth=6)
    a = bench_throughput(build_model(shallow, 0), 8, 2, 7)
    b = bench_throughput(build_model(deep, 0), 8, 2, 7)
    assert b.mean < a.mean


def test_bench_rejects_bad_iteration_counts():
    with pytest.raises(ValueError):
        bench_throughput(build_model(TINY, 0), timed_iters=0)
