"""
Set encoding, permutation invariance and the branch cache
=========================================================

A prompt is a set of (x, y) pairs. Each pair is embedded and encoded on its
own, the encodings are averaged, and the branch net turns the average into a
coefficient vector. Queries only run the trunk net against those coefficients.
"""

# %%
import time

import numpy as np

from deeposets.model import (DeepOSetsModel, Prompt, branch_features, build_paper_config,
                             encode_prompt, predict, predict_full)

model = DeepOSetsModel.initialize(build_paper_config(1), seed=0)
print("parameters:", model.parameter_count)

rng = np.random.default_rng(1)
prompt = Prompt(rng.standard_normal((10, 1)), rng.standard_normal(10))
xq = np.array([0.4])

# %% examples are sorted into a canonical order before summation,
# so any permutation gives the same bits
base = predict_full(model, prompt, xq)
shuffled = [predict_full(model, prompt.permuted(rng.permutation(10)), xq) for _ in range(100)]
print("bit-identical under 100 shuffles:", all(v == base for v in shuffled))

# %% mean pooling: repeating every example k times leaves the summary unchanged
dup = Prompt(np.tile(prompt.xs, (3, 1)), np.tile(prompt.ys, 3))
print("duplication gap:", abs(predict_full(model, dup, xq) - base))

# %% the cache is one coefficient vector, whatever n is
for n in (1, 10, 1000):
    p = Prompt(rng.standard_normal((n, 1)), rng.standard_normal(n))
    cache = branch_features(model, encode_prompt(model, p))
    print(f"n={n:5d} cache size {cache.coefficients.size}")

# %% cached queries skip the encoder entirely
cache = branch_features(model, encode_prompt(model, prompt))
queries = rng.standard_normal((2000, 1))
t = time.perf_counter()
for q in queries:
    predict(model, cache, q)
per = (time.perf_counter() - t) / len(queries)
print(f"cached query: {per * 1e3:.4f} ms")
print("same as full pipeline:", predict(model, cache, xq) == base)
