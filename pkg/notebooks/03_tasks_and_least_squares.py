"""
Synthetic regression tasks and the least-squares baseline
=========================================================

Tasks are f(x) = a.x with a, x ~ N(0, I) and optional label noise. Draws are
keyed by (seed, task index), so any task can be regenerated on its own.
"""

# %%
import numpy as np

from deeposets.baseline import ols_fit, ols_predict
from deeposets.bench import EvalGrid, noise_scaling_fit, run_eval_grid
from deeposets.taskgen import TaskDistribution, sample_batch, sample_task

dist = TaskDistribution(d=1, n=10, noise_var=0.2, queries=4, seed=0)
task = sample_task(dist, index=7)
print("a =", task.a, "n =", task.prompt.n)
print("same task again:", np.array_equal(sample_task(dist, index=7).prompt.xs, task.prompt.xs))

# %% fit the prompt, score on noiseless targets
fit = ols_fit(task.prompt)
print("a_hat =", fit.a_hat, "rank", fit.rank)
print("query errors:", ols_predict(fit, task.queries) - task.targets)

# %% fewer examples than dimensions: minimum-norm solution
under = sample_task(TaskDistribution(d=5, n=3, seed=0), index=0)
fit = ols_fit(under.prompt)
print("d=5, n=3: rank", fit.rank, "|a_hat|", np.linalg.norm(fit.a_hat),
      "residual", np.abs(under.prompt.xs @ fit.a_hat - under.prompt.ys).max())

# %% OLS error grows linearly with the noise variance.
# For d=1 its expectation is sigma^2 / (n - 2).
rep = run_eval_grid(EvalGrid(ns=[10], noise_vars=[0.0, 0.04, 0.2, 2.0], tasks_per_cell=4000,
                             ols_only=True))
for c in rep.rows("ols"):
    print(f"noise {c['noise_var']:<5} mse {c['mse']:.3e} +- {c['stderr']:.1e}"
          f"   expected {c['noise_var'] / 8:.3e}")
fit = noise_scaling_fit(rep)
print(f"slope {fit.slope:.4f} (1/8 = 0.125), R^2 {fit.rvalue ** 2:.5f}")

# %% more examples, smaller error
rep = run_eval_grid(EvalGrid(ns=[3, 5, 10, 20, 40], noise_vars=[0.2], tasks_per_cell=4000,
                             ols_only=True))
print([(c["n"], round(c["mse"], 4)) for c in rep.rows("ols")])
