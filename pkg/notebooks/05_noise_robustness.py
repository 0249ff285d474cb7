"""
DeepOSets against least squares under label noise
=================================================

Uses the checkpoint written by 04_training.py. Prompts get label noise of
increasing variance; errors are always measured against noiseless targets.
"""

# %%
from pathlib import Path

from deeposets.bench import EvalGrid, compare_noise_robustness, run_eval_grid
from deeposets.plots import plot_mse_vs_n, plot_mse_vs_noise

out = Path("notebook-runs")
grid = EvalGrid(ns=[5, 10, 20], noise_vars=[0.0, 0.04, 0.2, 2.0], tasks_per_cell=1000,
                checkpoint=str(out / "d1.json"))
rep = run_eval_grid(grid)
rep.write_csv(out / "eval.csv")

for c in rep.rows(n=10):
    lit = c["literature_mse"]
    print(f"{c['method']:>9}  noise {c['noise_var']:<5} mse {c['mse']:.3e} +- {c['stderr']:.1e}"
          + (f"   published {lit:.2e}" if lit is not None else ""))

# %% how fast does each method degrade?
r = compare_noise_robustness(rep, d=1, n=10, reference_noise=0.2)
for method, ratios in r.ratios.items():
    print(method, {k: round(v, 2) for k, v in ratios.items()})
print("verdict:", r.verdict)

# %% figures
print(plot_mse_vs_noise(rep, out / "mse_vs_noise.svg", n=10))
print(plot_mse_vs_n(rep, out / "mse_vs_n.svg", noise_var=0.2))
