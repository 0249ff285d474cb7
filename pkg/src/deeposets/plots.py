"""SVG figures from saved reports: MSE vs n, MSE vs noise, latency vs n."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import ExperimentReport, LatencyReport  # noqa: E402

_STYLE = {"deeposets": dict(color="tab:red", marker="o"), "ols": dict(color="tab:blue", marker="s")}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_mse_vs_n(report: ExperimentReport, path, d=1, noise_var=0.2):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, style in _STYLE.items():
        rows = sorted((c for c in report.rows(method, d) if abs(c["noise_var"] - noise_var) < 1e-12),
                      key=lambda c: c["n"])
        if rows:
            ax.errorbar([c["n"] for c in rows], [c["mse"] for c in rows],
                        yerr=[c["stderr"] for c in rows], label=method, capsize=2, **style)
    ax.set_xlabel("number of in-context examples n")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(f"d={d}, noise variance {noise_var}")
    ax.legend()
    return _save(fig, path)


def plot_mse_vs_noise(report: ExperimentReport, path, d=1, n=10):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, style in _STYLE.items():
        rows = sorted((c for c in report.rows(method, d, n) if c["noise_var"] > 0),
                      key=lambda c: c["noise_var"])
        if rows:
            ax.errorbar([c["noise_var"] for c in rows], [c["mse"] for c in rows],
                        yerr=[c["stderr"] for c in rows], label=method, capsize=2, **style)
    ax.set_xlabel("noise variance")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(f"d={d}, n={n}")
    ax.legend()
    return _save(fig, path)


def plot_latency(report: LatencyReport, path):
    ns = [r["n"] for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for stage, color in (("first_query", "tab:orange"), ("cached_query", "tab:green"),
                         ("encode", "tab:purple")):
        med = [r[stage]["median_ms"] for r in report.rows]
        lo = [r[stage]["median_ms"] - r[stage]["q25_ms"] for r in report.rows]
        hi = [r[stage]["q75_ms"] - r[stage]["median_ms"] for r in report.rows]
        ax.errorbar(ns, med, yerr=[lo, hi], label=stage.replace("_", " "), color=color,
                    marker=".", capsize=1)
    ax.set_xlabel("number of in-context examples n")
    ax.set_ylabel("time per call (ms)")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)
