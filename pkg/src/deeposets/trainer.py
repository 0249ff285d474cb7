"""Training loop: fresh noiseless tasks every step, squared loss, Adam with step decay."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .model import DeepOSetsModel, ModelConfig, backward_batch, build_paper_config, forward_batch, predict_full
from .nn import AdamState, adam_step
from .taskgen import GaussianStream, TaskDistribution, TaskSample, sample_task, stack_tasks

log = logging.getLogger(__name__)

# prompt length used for training each preset
PRESET_TRAIN_N = {1: 13, 5: 50}


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    model: ModelConfig
    tasks: TaskDistribution
    iterations: int = 16_000
    batch_size: int = 64
    seed: int = 0
    base_lr: float = 1e-3
    decay_rate: float = 0.9
    decay_steps: int = 2000
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.tasks.d != self.model.input_dim:
            raise ValueError(f"task dimension {self.tasks.d} != model input dimension "
                             f"{self.model.input_dim}")
        if self.tasks.queries < 1:
            raise ValueError("training needs at least one query per task")

    @classmethod
    def preset(cls, d, **overrides) -> "TrainConfig":
        seed = overrides.get("seed", 0)
        tasks = TaskDistribution(d=d, n=PRESET_TRAIN_N[d], noise_var=0.0, queries=1, seed=seed)
        return cls(model=build_paper_config(d), tasks=tasks, **overrides)

    def to_dict(self) -> dict:
        t = self.tasks
        return {
            "model": self.model.to_dict(),
            "tasks": {"d": t.d, "n": list(t.n) if isinstance(t.n, tuple) else t.n,
                      "noise_var": t.noise_var, "queries": t.queries, "seed": t.seed},
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "base_lr": self.base_lr,
            "decay_rate": self.decay_rate,
            "decay_steps": self.decay_steps,
        }


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, loss, lr, elapsed_seconds)
    losses: list = field(default_factory=list)  # every step's batch loss
    start_iteration: int = 0
    optimizer: AdamState | None = None

    def record(self, iteration, loss, lr, elapsed):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("log iterations must increase")
        self.rows.append((int(iteration), float(loss), float(lr), float(elapsed)))

    def smoothed(self, window=500, end=None) -> float:
        """Mean batch loss over the ``window`` steps ending at step ``end`` (default: last)."""
        losses = np.asarray(self.losses)
        stop = len(losses) if end is None else end - self.start_iteration
        if stop <= 0:
            raise ValueError("no losses recorded")
        return float(losses[max(0, stop - window):stop].mean())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr", "elapsed_seconds"])
            for it, loss_, lr, el in self.rows:
                w.writerow([it, repr(loss_), repr(lr), f"{el:.6f}"])


def loss(model: DeepOSetsModel, task: TaskSample) -> float:
    """Mean over the task's queries of (prediction - noiseless target)^2."""
    preds = predict_full(model, task.prompt, task.queries)
    r = np.asarray(preds) - task.targets
    return float(np.mean(r * r))


def batch_loss_and_grads(model, xs, ys, queries, targets, grads=None):
    preds, trace = forward_batch(model, xs, ys, queries, return_trace=True)
    r = preds - targets
    value = float(np.mean(r * r))
    grads = backward_batch(model, trace, 2.0 * r / r.size, grads)
    return value, grads


def training_batch(config: TrainConfig, iteration, stream=None):
    """Tasks for one step: indices [iteration*B, (iteration+1)*B)."""
    B = config.batch_size
    stream = stream or GaussianStream(config.tasks.seed)
    first = iteration * B
    n = config.tasks.prompt_length(first, stream)
    return [sample_task(config.tasks, stream, index=first + k, n=n) for k in range(B)]


def _save(model, path, config, optimizer, iteration, last_loss):
    meta = {"iterations": iteration, "final_loss": last_loss, "train_config": config.to_dict()}
    return save_checkpoint(model, path, seed=config.seed, metadata=meta, optimizer=optimizer)


def train(config: TrainConfig, resume: Checkpoint | None = None, callback=None):
    """Run the loop and return ``(model, TrainLog)``.

    Deterministic for a fixed config. ``resume`` continues from a checkpoint
    that carries optimizer state; the remaining steps are the same as in an
    uninterrupted run.
    """
    if resume is not None:
        if resume.optimizer is None:
            raise ValueError("checkpoint has no optimizer state to resume from")
        model = resume.model
        opt = resume.optimizer
    else:
        model = DeepOSetsModel.initialize(config.model, seed=config.seed)
        opt = None
    params = model.parameters()
    if opt is None:
        opt = AdamState.for_params(params, base_lr=config.base_lr, decay_rate=config.decay_rate,
                                   decay_steps=config.decay_steps)
    start = opt.step
    tlog = TrainLog(start_iteration=start, optimizer=opt)
    stream = GaussianStream(config.tasks.seed)
    grads = model.zero_gradients()
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    value = float("nan")
    for it in range(start, config.iterations):
        xs, ys, qs, targets = stack_tasks(training_batch(config, it, stream))
        grads.zero()
        value, grads = batch_loss_and_grads(model, xs, ys, qs, targets, grads)
        if not np.isfinite(value):
            path = None
            if ckdir:
                path = ckdir / f"diverged-{it}.json"
                _save(model, path, config, opt, it, None)
            raise TrainingDiverged(f"non-finite loss at iteration {it}", path)
        lr = opt.learning_rate()
        adam_step(params, grads, opt)
        tlog.losses.append(value)
        done = it + 1
        if done % config.log_every == 0 or done == config.iterations:
            elapsed = time.perf_counter() - t0
            tlog.record(done, value, lr, elapsed)
            log.info("iter %d loss %.3e smoothed %.3e lr %.2e", done, value,
                     tlog.smoothed(min(500, len(tlog.losses))), lr)
            if callback is not None:
                callback(done, tlog)
        if ckdir and config.checkpoint_every and done % config.checkpoint_every == 0:
            _save(model, ckdir / f"step-{done:06d}.json", config, opt, done, value)
    return model, tlog


def save_trained(model, path, config: TrainConfig, tlog: TrainLog):
    """Checkpoint a finished run, including optimizer state for resuming."""
    last = tlog.losses[-1] if tlog.losses else None
    return _save(model, path, config, tlog.optimizer,
                 tlog.start_iteration + len(tlog.losses), last)
