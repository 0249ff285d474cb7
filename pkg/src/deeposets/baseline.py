"""Ordinary least squares through the origin, fit on the prompt examples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Prompt
from .nn import DimensionError

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class OlsFit:
    a_hat: np.ndarray
    rss: float
    rank: int

    @property
    def d(self) -> int:
        return self.a_hat.shape[0]

    @property
    def full_rank(self) -> bool:
        return self.rank == self.d


def _min_norm_solve(X, y, rtol=RANK_RTOL):
    """Minimum-norm least-squares solution from the thin SVD of X.

    Works on single problems (X: (n, d)) and stacks (X: (T, n, d)).
    Singular values below ``rtol * s_max`` are treated as zero.
    """
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s_max = s[..., :1]
    keep = s > rtol * s_max
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    uty = np.einsum("...nk,...n->...k", U, y)
    a = np.einsum("...kd,...k->...d", Vt, inv * uty)
    return a, keep.sum(axis=-1)


def ols_fit(prompt: Prompt) -> OlsFit:
    """Least-squares weights a minimizing sum (y_i - a.x_i)^2, no intercept.

    Rank-deficient designs (e.g. n < d) get the minimum-norm solution and a
    rank below d; that is reported, not raised.
    """
    if not isinstance(prompt, Prompt):
        prompt = Prompt(*prompt)
    a, rank = _min_norm_solve(prompt.xs, prompt.ys)
    r = prompt.ys - prompt.xs @ a
    return OlsFit(a, float(r @ r), int(rank))


def ols_predict(fit: OlsFit, x_query):
    xq = np.asarray(x_query, dtype=np.float64)
    if xq.ndim == 0:
        xq = xq.reshape(1)
    if xq.shape[-1] != fit.d:
        raise DimensionError(f"query has dimension {xq.shape[-1]}, fit has {fit.d}")
    out = xq @ fit.a_hat
    return float(out) if xq.ndim == 1 else out


def ols_fit_batch(xs, ys):
    """Vectorised :func:`ols_fit` for (T, n, d) designs; returns (a_hat (T, d), rank (T,))."""
    return _min_norm_solve(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))


def ols_predict_batch(a_hat, queries):
    """Predictions (T, q) for queries (T, q, d)."""
    return np.einsum("tqd,td->tq", queries, a_hat)
