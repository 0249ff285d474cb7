"""
Training the d=1 preset
=======================

Each step draws 64 fresh noiseless tasks with 13 examples and one query each,
and takes one Adam step on the mean squared error. The full run is 16000
steps (several minutes on one core); pass a smaller count to try it quickly:

    python notebooks/04_training.py 2000
"""

# %%
import logging
import sys
from pathlib import Path

import numpy as np

from deeposets.model import Prompt, predict_full
from deeposets.trainer import TrainConfig, save_trained, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out = Path("notebook-runs")
out.mkdir(exist_ok=True)

cfg = TrainConfig.preset(1, iterations=iterations, log_every=500)
model, tlog = train(cfg)
sha = save_trained(model, out / "d1.json", cfg, tlog)
tlog.write_csv(out / "d1_log.csv")
print(f"smoothed training MSE {tlog.smoothed(500):.3e}  checkpoint {sha[:12]}")

# %% the model has never seen these prompts
rng = np.random.default_rng(0)
for a in (-1.5, 0.3, 2.0):
    xs = rng.standard_normal((10, 1))
    prompt = Prompt(xs, a * xs[:, 0])
    q = np.array([0.7])
    print(f"a={a:+.1f}  predicted {predict_full(model, prompt, q):+.4f}  true {a * 0.7:+.4f}")

# %% loss curve
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

w = 100
curve = np.convolve(tlog.losses, np.ones(w) / w, mode="valid")
plt.semilogy(np.arange(w, len(tlog.losses) + 1), curve)
plt.xlabel("iteration")
plt.ylabel(f"training MSE ({w}-step mean)")
plt.savefig(out / "d1_loss.svg")
print("wrote", out / "d1_loss.svg")
