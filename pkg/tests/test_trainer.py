import csv

import numpy as np
import pytest

import deeposets.trainer as trainer_mod
from deeposets.checkpoint import load_checkpoint
from deeposets.model import DeepOSetsModel, ModelConfig, model_gradients, predict_full
from deeposets.taskgen import TaskDistribution, TaskSample, sample_task, stack_tasks
from deeposets.trainer import (
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    batch_loss_and_grads,
    loss,
    save_trained,
    train,
    training_batch,
)

TINY = ModelConfig(input_dim=1, embed_width=2, encoder_hidden=(6,), pooled_dim=6,
                   branch_hidden=(6,), trunk_hidden=(6,), readout_width=4)


def tiny_train_config(**kw):
    base = dict(model=TINY, tasks=TaskDistribution(d=1, n=5, queries=2, seed=3),
                iterations=20, batch_size=8, seed=1, log_every=5)
    base.update(kw)
    return TrainConfig(**base)


def zero_model():
    m = DeepOSetsModel.initialize(TINY, seed=0)
    for layer in m.branch.layers:
        layer.weights[:] = 0.0
    return m


def test_loss_zero_when_model_matches():
    m = DeepOSetsModel.initialize(TINY, seed=0)
    t = sample_task(TaskDistribution(d=1, n=4, queries=3, seed=0), index=0)
    t.targets = np.asarray(predict_full(m, t.prompt, t.queries))
    assert loss(m, t) == 0.0


def test_loss_constant_zero_model():
    m = zero_model()
    t = sample_task(TaskDistribution(d=1, n=4, queries=2, seed=0), index=0)
    t.targets = np.array([1.0, -1.0])
    assert loss(m, t) == 1.0


def test_loss_matches_direct_formula():
    m = DeepOSetsModel.initialize(TINY, seed=5)
    t = sample_task(TaskDistribution(d=1, n=7, queries=9, seed=2), index=3)
    preds = [predict_full(m, t.prompt, q) for q in t.queries]
    direct = sum((p - y) ** 2 for p, y in zip(preds, t.targets)) / len(preds)
    assert loss(m, t) == pytest.approx(direct, rel=1e-14, abs=1e-14)


def test_zero_iterations_returns_initial_model():
    model, tlog = train(tiny_train_config(iterations=0))
    init = DeepOSetsModel.initialize(TINY, seed=1)
    assert all(np.array_equal(p, q) for p, q in zip(model.parameters(), init.parameters()))
    assert tlog.rows == [] and tlog.losses == []


def test_training_is_deterministic():
    a, la = train(tiny_train_config())
    b, lb = train(tiny_train_config())
    assert la.losses == lb.losses
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_training_reduces_loss():
    cfg = tiny_train_config(iterations=300, batch_size=16, log_every=50)
    _, tlog = train(cfg)
    assert tlog.smoothed(50) < np.mean(tlog.losses[:50])


def test_log_rows_and_csv(tmp_path):
    _, tlog = train(tiny_train_config(iterations=12, log_every=5))
    assert [r[0] for r in tlog.rows] == [5, 10, 12]
    assert all(r[2] == 1e-3 for r in tlog.rows)
    assert all(np.isfinite(r[1]) and r[1] >= 0 for r in tlog.rows)
    path = tmp_path / "log.csv"
    tlog.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "loss", "lr", "elapsed_seconds"]
    assert [int(r[0]) for r in rows[1:]] == [5, 10, 12]
    assert float(rows[1][1]) == tlog.rows[0][1]


def test_log_rejects_non_increasing():
    tlog = TrainLog()
    tlog.record(5, 0.1, 1e-3, 0.0)
    with pytest.raises(ValueError):
        tlog.record(5, 0.1, 1e-3, 0.0)


def test_smoothed_window():
    tlog = TrainLog(losses=[1.0] * 10 + [3.0] * 10)
    assert tlog.smoothed(10) == 3.0
    assert tlog.smoothed(10, end=10) == 1.0
    assert tlog.smoothed(500) == 2.0


def test_batches_use_consecutive_indices():
    cfg = tiny_train_config(batch_size=4)
    tasks = training_batch(cfg, 3)
    assert [t.index for t in tasks] == [12, 13, 14, 15]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_train_config(iterations=20, checkpoint_every=10, checkpoint_dir=str(tmp_path))
    full, flog = train(cfg)
    ck = load_checkpoint(tmp_path / "step-000010.json")
    resumed, rlog = train(cfg, resume=ck)
    assert rlog.start_iteration == 10
    assert rlog.losses == flog.losses[10:]
    assert all(np.array_equal(p, q) for p, q in zip(full.parameters(), resumed.parameters()))


def test_save_trained_records_metadata(tmp_path):
    cfg = tiny_train_config(iterations=6)
    model, tlog = train(cfg)
    save_trained(model, tmp_path / "m.json", cfg, tlog)
    ck = load_checkpoint(tmp_path / "m.json")
    assert ck.metadata["iterations"] == 6
    assert ck.metadata["final_loss"] == tlog.losses[-1]
    assert ck.optimizer.step == 6


def test_nan_loss_aborts_with_checkpoint(tmp_path, monkeypatch):
    real = trainer_mod.stack_tasks

    def poisoned(tasks):
        xs, ys, qs, targets = real(tasks)
        if tasks[0].index >= 16:
            targets = targets * np.nan
        return xs, ys, qs, targets

    monkeypatch.setattr(trainer_mod, "stack_tasks", poisoned)
    with pytest.raises(TrainingDiverged) as err:
        train(tiny_train_config(batch_size=8, checkpoint_dir=str(tmp_path)))
    assert err.value.checkpoint_path is not None
    assert load_checkpoint(err.value.checkpoint_path).metadata["iterations"] == 2


def test_batch_gradient_is_sum_of_per_task_gradients():
    m = DeepOSetsModel.initialize(TINY, seed=2)
    cfg = tiny_train_config(batch_size=3)
    tasks = training_batch(cfg, 0)
    xs, ys, qs, targets = stack_tasks(tasks)
    value, grads = batch_loss_and_grads(m, xs, ys, qs, targets)
    merged = None
    count = xs.shape[0] * qs.shape[1]
    for t in tasks:
        for q, y in zip(t.queries, t.targets):
            p = predict_full(m, t.prompt, q, canonical=False)
            g = model_gradients(m, t.prompt, q, upstream=2 * (p - y) / count).arrays()
            merged = g if merged is None else [a + b for a, b in zip(merged, g)]
    for a, b in zip(grads.arrays(), merged):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_train_config(batch_size=0)
    with pytest.raises(ValueError):
        tiny_train_config(tasks=TaskDistribution(d=2, n=3))
    with pytest.raises(ValueError):
        tiny_train_config(iterations=-1)


def test_preset_config():
    cfg = TrainConfig.preset(1, iterations=5)
    assert cfg.tasks.n == 13 and cfg.tasks.noise_var == 0.0 and cfg.batch_size == 64
    assert TrainConfig.preset(5).tasks.n == 50
