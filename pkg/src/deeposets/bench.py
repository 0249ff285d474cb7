"""Evaluation grids (MSE over d, n, noise) and inference-latency measurements.

MSE convention used everywhere here: for each task, the mean over its query
points of (prediction - noiseless target)^2; a cell reports the mean of those
per-task values and their standard error.
"""
from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .baseline import ols_fit_batch, ols_predict_batch
from .checkpoint import load_checkpoint
from .model import Prompt, branch_features, encode_prompt, forward_batch, predict, predict_full
from .taskgen import TaskDistribution, sample_batch, sample_task, stack_tasks

MSE_DEFINITION = ("per task: mean over queries of (prediction - noiseless target)^2; "
                  "per cell: mean and standard error over tasks")

# Published MSE values (d, n, noise_var) -> method -> value. Echoed in reports for
# side-by-side reading; the transformer numbers are not measured by this package.
LITERATURE_MSE = {
    (1, 10, 0.0): {"transformer": 4.74e-4, "deeposets": 1.73e-4, "ols": 1.16e-14},
    (1, 10, 0.04): {"transformer": 6.80e-3, "deeposets": 6.06e-4, "ols": 1.91e-4},
    (1, 10, 0.2): {"transformer": 0.132, "deeposets": 1.12e-2, "ols": 4.77e-3},
    (1, 10, 2.0): {"transformer": 6.91, "deeposets": 0.458, "ols": 0.477},
    (5, 10, 0.0): {"transformer": 3.46e-3, "deeposets": 0.754, "ols": 1.16e-12},
    (5, 10, 0.04): {"transformer": 1.02e-2, "deeposets": 0.836, "ols": 2.05e-3},
    (5, 10, 0.2): {"transformer": 8.81e-2, "deeposets": 0.812, "ols": 5.36e-2},
    (5, 10, 2.0): {"transformer": 5.17, "deeposets": 2.75, "ols": 5.37},
}
# d=1, n=10, noise 0.2; milliseconds per query and parameter counts.
LITERATURE_LATENCY = {
    "transformer": {"ms_per_query": 7.11, "parameters": 22_000_000, "query_complexity": "O(n^2)"},
    "deeposets": {"ms_per_query": 0.087, "parameters": 72_000, "query_complexity": "O(1) cached"},
}

MIN_REPETITIONS = 100


def cell_seed(seed, d, n, noise_var) -> int:
    """Independent stream seed for one grid cell."""
    ss = np.random.SeedSequence([int(seed), int(d), int(n), int(round(noise_var * 1e9))])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class EvalGrid:
    ds: list = field(default_factory=lambda: [1])
    ns: list = field(default_factory=lambda: [10])
    noise_vars: list = field(default_factory=lambda: [0.0, 0.04, 0.2, 2.0])
    tasks_per_cell: int = 2000
    queries_per_task: int = 16
    seed: int = 0
    checkpoint: str | None = None
    ols_only: bool = False

    def __post_init__(self):
        if not self.ds or not self.ns or not self.noise_vars:
            raise ValueError("grid needs at least one d, one n and one noise level")
        if any(n < 1 for n in self.ns) or any(d < 1 for d in self.ds):
            raise ValueError("n and d must be at least 1")
        if any(v < 0 for v in self.noise_vars):
            raise ValueError("noise variances must be non-negative")
        if self.tasks_per_cell < 2 or self.queries_per_task < 1:
            raise ValueError("need at least 2 tasks and 1 query per cell")


@dataclass
class ExperimentReport:
    cells: list  # dicts: method, d, n, noise_var, mse, stderr, tasks, queries, literature_mse
    metadata: dict
    literature: list = field(default_factory=list)

    def rows(self, method=None, d=None, n=None):
        return [c for c in self.cells
                if (method is None or c["method"] == method)
                and (d is None or c["d"] == d) and (n is None or c["n"] == n)]

    def cell(self, method, d, n, noise_var):
        for c in self.rows(method, d, n):
            if math.isclose(c["noise_var"], noise_var, rel_tol=0, abs_tol=1e-12):
                return c
        raise KeyError((method, d, n, noise_var))

    def to_dict(self):
        return {"metadata": self.metadata, "cells": self.cells, "literature": self.literature}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path):
        cols = ["method", "d", "n", "noise_var", "mse", "stderr", "tasks", "queries",
                "measured", "literature_mse"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for c in self.cells:
                w.writerow([c["method"], c["d"], c["n"], c["noise_var"], repr(c["mse"]),
                            repr(c["stderr"]), c["tasks"], c["queries"], "yes",
                            "" if c.get("literature_mse") is None else c["literature_mse"]])
            for r in self.literature:
                w.writerow([r["method"], r["d"], r["n"], r["noise_var"], r["mse"], "", "", "",
                            "no (literature reference)", r["mse"]])

    @classmethod
    def read_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["cells"], doc["metadata"], doc.get("literature", []))


def _deeposets_task_mse(model, xs, ys, qs, targets, chunk=256):
    out = np.empty(xs.shape[0])
    for s in range(0, xs.shape[0], chunk):
        preds = forward_batch(model, xs[s:s + chunk], ys[s:s + chunk], qs[s:s + chunk])
        out[s:s + chunk] = np.mean((preds - targets[s:s + chunk]) ** 2, axis=1)
    return out


def _summary(method, d, n, noise_var, per_task, queries):
    lit = LITERATURE_MSE.get((d, n, round(noise_var, 12)), {}).get(method)
    return {
        "method": method,
        "d": int(d),
        "n": int(n),
        "noise_var": float(noise_var),
        "mse": float(per_task.mean()),
        "stderr": float(per_task.std(ddof=1) / math.sqrt(per_task.size)),
        "tasks": int(per_task.size),
        "queries": int(queries),
        "literature_mse": lit,
    }


def run_eval_grid(grid: EvalGrid, model=None) -> ExperimentReport:
    """Evaluate DeepOSets (if a model or checkpoint is given) and OLS on every cell.

    Prompts carry the cell's label noise; errors are always measured against
    noiseless targets. Cells whose d differs from the model's input dimension
    get OLS rows only.
    """
    sha = None
    if model is None and grid.checkpoint and not grid.ols_only:
        if not os.path.exists(grid.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {grid.checkpoint}")
        ck = load_checkpoint(grid.checkpoint)
        model, sha = ck.model, ck.sha256
    if grid.ols_only:
        model = None
    cells = []
    for d in grid.ds:
        for n in grid.ns:
            for v in grid.noise_vars:
                dist = TaskDistribution(d=d, n=n, noise_var=v, queries=grid.queries_per_task,
                                        seed=cell_seed(grid.seed, d, n, v))
                xs, ys, qs, targets = stack_tasks(sample_batch(dist, grid.tasks_per_cell))
                if model is not None and model.input_dim == d:
                    per_task = _deeposets_task_mse(model, xs, ys, qs, targets)
                    cells.append(_summary("deeposets", d, n, v, per_task, grid.queries_per_task))
                a_hat, _ = ols_fit_batch(xs, ys)
                per_task = np.mean((ols_predict_batch(a_hat, qs) - targets) ** 2, axis=1)
                cells.append(_summary("ols", d, n, v, per_task, grid.queries_per_task))
    literature = [
        {"method": "transformer (literature)", "d": d, "n": n, "noise_var": v,
         "mse": vals["transformer"], "measured": False}
        for (d, n, v), vals in LITERATURE_MSE.items()
        if d in grid.ds and n in grid.ns and any(math.isclose(v, g) for g in grid.noise_vars)
    ]
    meta = {
        "grid": asdict(grid),
        "checkpoint_sha256": sha,
        "seed": grid.seed,
        "mse_definition": MSE_DEFINITION,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return ExperimentReport(cells, meta, literature)


# --- derived analyses -------------------------------------------------------

@dataclass
class NoiseRobustness:
    d: int
    n: int
    reference_noise: float
    ratios: dict  # method -> {noise_var: mse / mse(reference)}
    verdict: str  # "deeposets_more_robust", "ols_more_robust" or "neutral"

    @property
    def deeposets_less_sensitive(self) -> bool:
        return self.verdict == "deeposets_more_robust"


def compare_noise_robustness(report: ExperimentReport, d=1, n=10, reference_noise=None,
                             methods=("deeposets", "ols"), rtol=1e-9) -> NoiseRobustness:
    """MSE growth with noise, relative to a reference level, for two methods.

    The reference defaults to the smallest positive noise level. The verdict
    compares the ratios at the largest noise level.
    """
    levels = {}
    for m in methods:
        rows = [c for c in report.rows(m, d, n)]
        if len({c["noise_var"] for c in rows}) < 3:
            raise ValueError(f"need at least 3 noise levels for {m} at d={d}, n={n}")
        levels[m] = {c["noise_var"]: c["mse"] for c in rows}
    common = sorted(set.intersection(*(set(v) for v in levels.values())))
    if reference_noise is None:
        positive = [v for v in common if v > 0]
        if not positive:
            raise ValueError("no positive noise level to use as reference")
        reference_noise = positive[0]
    top = max(common)
    ratios = {m: {v: levels[m][v] / levels[m][reference_noise] for v in common if v >= reference_noise}
              for m in methods}
    a, b = ratios[methods[0]][top], ratios[methods[1]][top]
    if math.isclose(a, b, rel_tol=rtol):
        verdict = "neutral"
    else:
        verdict = f"{methods[0]}_more_robust" if a < b else f"{methods[1]}_more_robust"
    return NoiseRobustness(d, n, reference_noise, ratios, verdict)


def noise_scaling_fit(report: ExperimentReport, method="ols", d=1, n=10):
    """Linear regression of cell MSE on noise variance; returns scipy's result."""
    rows = sorted(report.rows(method, d, n), key=lambda c: c["noise_var"])
    if len(rows) < 3:
        raise ValueError("need at least 3 noise levels")
    return stats.linregress([c["noise_var"] for c in rows], [c["mse"] for c in rows])


def monotone_in_n_violations(report: ExperimentReport, method="ols", d=1, noise_var=0.2,
                             n_sigma=2.0):
    """Adjacent n pairs where MSE rises by more than ``n_sigma`` combined standard errors."""
    rows = sorted((c for c in report.rows(method, d)
                   if math.isclose(c["noise_var"], noise_var)), key=lambda c: c["n"])
    bad = []
    for lo, hi in zip(rows[:-1], rows[1:]):
        if hi["mse"] - lo["mse"] > n_sigma * math.hypot(lo["stderr"], hi["stderr"]):
            bad.append((lo["n"], hi["n"]))
    return bad


# --- latency ----------------------------------------------------------------

def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


MIN_MEASUREMENT_SECONDS = 2e-4


def _group_size(fn, min_seconds=None):
    """Calls per measurement so one measurement spans ``min_seconds``.

    The floor is 1000 timer ticks; short calls are grouped and timed together.
    """
    res = time.get_clock_info("perf_counter").resolution
    if min_seconds is None:
        min_seconds = max(1000 * res, MIN_MEASUREMENT_SECONDS)
    fn()
    t = time.perf_counter()
    fn()
    single = time.perf_counter() - t
    return 1 if single >= min_seconds else int(math.ceil(min_seconds / max(single, res)))


def _timed(fn, per):
    t = time.perf_counter()
    for _ in range(per):
        fn()
    return (time.perf_counter() - t) / per


def _measure_interleaved(cases, repetitions, warmup_fraction=0.1):
    """Per-call times for each case, sampled round-robin.

    Every round takes one measurement of every case, so slow drift of the
    machine (frequency scaling, neighbours) is shared by all cases instead of
    biasing whichever was measured last. The first rounds are warmup.
    """
    pers = {k: _group_size(fn) for k, fn in cases.items()}
    warm = int(math.ceil(repetitions * warmup_fraction / (1 - warmup_fraction)))
    samples = {k: [] for k in cases}
    for i in range(warm + repetitions):
        for k, fn in cases.items():
            dt = _timed(fn, pers[k])
            if i >= warm:
                samples[k].append(dt)
    return {k: np.asarray(v) for k, v in samples.items()}, pers


def _quartiles_ms(samples):
    q1, med, q3 = np.percentile(samples * 1e3, [25, 50, 75])
    return {"median_ms": float(med), "q25_ms": float(q1), "q75_ms": float(q3)}


@dataclass
class LatencyReport:
    rows: list  # per n: encode / first_query / cached_query quartiles
    machine: dict
    metadata: dict
    literature: dict = field(default_factory=lambda: dict(LITERATURE_LATENCY))

    def row(self, n):
        for r in self.rows:
            if r["n"] == n:
                return r
        raise KeyError(n)

    def flatness(self):
        """Theil-Sen slope of the cached-query median against n (ms per example)."""
        ns = [r["n"] for r in self.rows]
        ys = [r["cached_query"]["median_ms"] for r in self.rows]
        if len(ns) < 2:
            return None
        slope, intercept, lo, hi = stats.theilslopes(ys, ns)
        span = (max(ns) - min(ns)) * abs(slope)
        return {"slope_ms_per_example": float(slope), "low": float(lo), "high": float(hi),
                "consistent_with_zero": bool(lo <= 0.0 <= hi or span < 0.1 * float(np.median(ys)))}

    def to_dict(self):
        return {"metadata": self.metadata, "machine": self.machine, "rows": self.rows,
                "flatness": self.flatness(), "literature": self.literature}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "stage", "median_ms", "q25_ms", "q75_ms", "calls_per_measurement"])
            for r in self.rows:
                for stage in ("encode", "first_query", "cached_query"):
                    s = r[stage]
                    w.writerow([r["n"], stage, s["median_ms"], s["q25_ms"], s["q75_ms"],
                                s["calls_per_measurement"]])

    @classmethod
    def read_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["rows"], doc["machine"], doc["metadata"], doc.get("literature", {}))


def run_latency_bench(model, n_list, repetitions=200, seed=0, noise_var=0.2,
                      warmup_fraction=0.1) -> LatencyReport:
    """Time prompt encoding, a first query, and cached queries for each n.

    ``model`` may be a DeepOSetsModel or a checkpoint path. Runs with BLAS
    limited to one thread and the process pinned to one CPU where the OS allows.
    """
    if repetitions < MIN_REPETITIONS:
        raise ValueError(f"repetitions must be at least {MIN_REPETITIONS} (got {repetitions})")
    n_list = [int(n) for n in n_list]
    if not n_list or min(n_list) < 1:
        raise ValueError("n_list needs positive prompt lengths")
    sha = None
    if isinstance(model, (str, os.PathLike)):
        ck = load_checkpoint(model)
        model, sha = ck.model, ck.sha256
    d = model.input_dim
    pinned, previous = None, None
    if hasattr(os, "sched_setaffinity"):
        previous = os.sched_getaffinity(0)
        pinned = min(previous)
        os.sched_setaffinity(0, {pinned})
    try:
        rows = _latency_rows(model, d, n_list, repetitions, seed, noise_var, warmup_fraction)
    finally:
        if previous is not None:
            os.sched_setaffinity(0, previous)
    meta = {
        "checkpoint_sha256": sha,
        "repetitions": repetitions,
        "warmup_fraction": warmup_fraction,
        "seed": seed,
        "d": d,
        "threads": 1,
        "pinned_cpu": pinned,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return LatencyReport(rows, machine_descriptor(), meta)


def _latency_rows(model, d, n_list, repetitions, seed, noise_var, warmup_fraction):
    cases = {}
    with threadpool_limits(limits=1):
        for n in n_list:
            task = sample_task(TaskDistribution(d=d, n=n, noise_var=noise_var, queries=1,
                                                seed=cell_seed(seed, d, n, noise_var)), index=0)
            prompt, xq = task.prompt, task.queries[0]
            cache = branch_features(model, encode_prompt(model, prompt))
            cases[n, "encode"] = lambda p=prompt: branch_features(model, encode_prompt(model, p))
            cases[n, "first_query"] = lambda p=prompt, q=xq: predict_full(model, p, q)
            cases[n, "cached_query"] = lambda c=cache, q=xq: predict(model, c, q)
        samples, pers = _measure_interleaved(cases, repetitions, warmup_fraction)
    rows = []
    for n in n_list:
        row = {"n": n}
        for stage in ("encode", "first_query", "cached_query"):
            row[stage] = {**_quartiles_ms(samples[n, stage]),
                          "calls_per_measurement": pers[n, stage]}
        rows.append(row)
    return rows
