"""Random linear regression tasks.

Each task is addressed by ``(seed, index)``: its random numbers come from a
Philox counter-based generator keyed on that pair, so any task can be
regenerated on its own and tasks can be produced in any order or in parallel.
Normal variates use the Box-Muller transform on 53-bit uniforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import Prompt

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0

LANE_NORMALS = 0
LANE_INTEGERS = 1


def _bit_generator(seed, index, lane=0):
    key = np.array([seed, index], dtype=np.uint64)
    counter = np.array([0, 0, 0, lane], dtype=np.uint64)
    return np.random.Philox(key=key, counter=counter)


def box_muller(raw):
    """Standard normals from an even-length array of uint64 words."""
    raw = np.asarray(raw, dtype=np.uint64)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53  # [0, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(raw.size)
    out[0::2] = r * np.cos(_TWO_PI * u2)
    out[1::2] = r * np.sin(_TWO_PI * u2)
    return out


class GaussianStream:
    """Deterministic, index-addressable source of standard normal blocks.

    ``normals(count, index)`` always returns the same block for the same
    ``(seed, index)``. Without an index the stream hands out consecutive
    indices starting at ``position``.
    """

    def __init__(self, seed=0, position=0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = seed
        self.position = int(position)

    def _next_index(self, index):
        if index is None:
            index = self.position
            self.position += 1
        return int(index)

    def normals(self, count, index=None):
        index = self._next_index(index)
        words = count + (count & 1)
        raw = _bit_generator(self.seed, index, LANE_NORMALS).random_raw(words)
        return box_muller(raw)[:count]

    def integer(self, low, high, index):
        """Uniform integer in [low, high] tied to ``index`` (independent of its normals)."""
        raw = int(_bit_generator(self.seed, index, LANE_INTEGERS).random_raw())
        return low + raw % (high - low + 1)

    def __repr__(self):
        return f"GaussianStream(seed={self.seed}, position={self.position})"


def gaussian_stream(seed=0) -> GaussianStream:
    return GaussianStream(seed)


@dataclass(frozen=True)
class TaskDistribution:
    """Linear tasks f(x) = a.x with a, x ~ N(0, I_d) and label noise N(0, noise_var).

    ``n`` is either a fixed prompt length or an inclusive ``(low, high)`` range.
    """

    d: int = 1
    n: int | tuple[int, int] = 10
    noise_var: float = 0.0
    queries: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if self.noise_var < 0:
            raise ValueError(f"noise variance must be non-negative, got {self.noise_var}")
        if self.queries < 0:
            raise ValueError("queries must be non-negative")
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid prompt length {self.n!r}")
        if not isinstance(self.n, int):
            object.__setattr__(self, "n", (int(lo), int(hi)))

    @property
    def n_range(self):
        if isinstance(self.n, (tuple, list)):
            return int(self.n[0]), int(self.n[1])
        return int(self.n), int(self.n)

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(self.noise_var))

    def prompt_length(self, index, stream=None) -> int:
        lo, hi = self.n_range
        if lo == hi:
            return lo
        stream = stream or GaussianStream(self.seed)
        return stream.integer(lo, hi, index)


@dataclass
class TaskSample:
    index: int
    a: np.ndarray  # (d,)
    prompt: Prompt  # possibly noisy labels
    clean_ys: np.ndarray  # (n,), exactly a.x_i
    queries: np.ndarray  # (q, d)
    targets: np.ndarray  # (q,), noiseless
    noise_var: float

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.prompt.n


def sample_task(dist: TaskDistribution, stream: GaussianStream | None = None,
                index=None, n=None) -> TaskSample:
    """Draw one task. Identical ``(dist.seed, index)`` gives an identical task.

    The block of normals is laid out as a (d), x (n*d), noise (n), queries
    (q*d); noise is scaled by sqrt(noise_var), so changing the variance keeps
    every other draw fixed.
    """
    if stream is None:
        stream = GaussianStream(dist.seed)
    index = stream._next_index(index)
    d, q = dist.d, dist.queries
    if n is None:
        n = dist.prompt_length(index, stream)
    z = stream.normals(d + n * d + n + q * d, index=index)
    a = z[:d]
    xs = z[d:d + n * d].reshape(n, d)
    eps = z[d + n * d:d + n * d + n]
    qs = z[d + n * d + n:].reshape(q, d)
    clean = xs @ a
    ys = clean + dist.noise_std * eps if dist.noise_var > 0 else clean.copy()
    return TaskSample(index, a, Prompt(xs, ys), clean, qs, qs @ a, dist.noise_var)


def sample_batch(dist: TaskDistribution, count, stream: GaussianStream | None = None,
                 start=None, n=None) -> list[TaskSample]:
    """``count`` consecutive tasks; same as calling :func:`sample_task` in a loop."""
    if stream is None:
        stream = GaussianStream(dist.seed)
    if start is not None:
        stream.position = int(start)
    return [sample_task(dist, stream, n=n) for _ in range(int(count))]


def stack_tasks(tasks):
    """Arrays (xs, ys, queries, targets) for tasks that share n and q."""
    xs = np.stack([t.prompt.xs for t in tasks])
    ys = np.stack([t.prompt.ys for t in tasks])
    qs = np.stack([t.queries for t in tasks])
    targets = np.stack([t.targets for t in tasks])
    return xs, ys, qs, targets


def task_record(task: TaskSample, dist: TaskDistribution) -> dict:
    return {
        "seed": dist.seed,
        "index": task.index,
        "d": task.d,
        "n": task.n,
        "noise_var": task.noise_var,
        "a": task.a.tolist(),
        "xs": task.prompt.xs.tolist(),
        "ys": task.prompt.ys.tolist(),
        "queries": [[*x, y] for x, y in zip(task.queries.tolist(), task.targets.tolist())],
    }


def dump_tasks(path, dist: TaskDistribution, indices):
    """Write one JSON object per line for the given task indices."""
    stream = GaussianStream(dist.seed)
    with open(path, "w") as fh:
        for i in indices:
            fh.write(json.dumps(task_record(sample_task(dist, stream, index=i), dist)) + "\n")


def load_tasks(path) -> list[TaskSample]:
    tasks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                q = np.asarray(r["queries"], dtype=np.float64).reshape(-1, r["d"] + 1)
                xs = np.asarray(r["xs"], dtype=np.float64).reshape(r["n"], r["d"])
                a = np.asarray(r["a"], dtype=np.float64)
                tasks.append(TaskSample(int(r["index"]), a, Prompt(xs, r["ys"]), xs @ a,
                                        q[:, :-1], q[:, -1], float(r["noise_var"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed task record ({exc})") from exc
    return tasks
