"""
Inference latency against prompt length
=======================================

Encoding a prompt is linear in n. Once the branch coefficients are cached, a
query only runs the trunk net, so its cost should not depend on n at all.
"""

# %%
from pathlib import Path

from deeposets.bench import run_latency_bench
from deeposets.plots import plot_latency

out = Path("notebook-runs")
rep = run_latency_bench(str(out / "d1.json"), [1, 2, 5, 10, 20, 50, 100], repetitions=200)
print(rep.machine)
for r in rep.rows:
    print(f"n={r['n']:<4} encode {r['encode']['median_ms']:.4f} ms   "
          f"first query {r['first_query']['median_ms']:.4f} ms   "
          f"cached {r['cached_query']['median_ms']:.4f} ms")

# %% a flat line has a Theil-Sen slope near zero
print(rep.flatness())
print("cached n=100 / n=10:",
      rep.row(100)["cached_query"]["median_ms"] / rep.row(10)["cached_query"]["median_ms"])
print(plot_latency(rep, out / "latency.svg"))
