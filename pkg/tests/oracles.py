"""Independent reference computations used by the tests.

Nothing here calls the package's forward/backward code paths: activations,
layer evaluation and pooling are re-implemented with plain loops so the tests
compare two separate routes to the same number.
"""
import math

import numpy as np

LAMBDA = 1.0507009873554805
ALPHA = 1.6732632423543772


def act(name, z):
    if name == "identity":
        return z
    if name == "tanh":
        return math.tanh(z)
    if name == "selu":
        return LAMBDA * z if z > 0 else LAMBDA * ALPHA * (math.exp(z) - 1.0)
    if name == "relu":
        return max(z, 0.0)
    raise ValueError(name)


def dense_ref(net, x):
    """Evaluate a DenseNet one scalar at a time."""
    h = [float(v) for v in x]
    for layer in net.layers:
        W, b, a = layer.weights, layer.bias, layer.activation.value
        h = [act(a, sum(W[i, j] * h[j] for j in range(len(h))) + b[i]) for i in range(W.shape[0])]
    return np.array(h)


def deeposets_ref(model, xs, ys, xq):
    """Single-shot prediction recomputing the whole pipeline for one query."""
    d = model.input_dim
    pooled = None
    for x, y in zip(np.atleast_2d(xs), ys):
        ypad = np.zeros(d)
        ypad[0] = y
        e = np.concatenate([dense_ref(model.x_embed, x), dense_ref(model.y_embed, ypad)])
        h = dense_ref(model.encoder, e)
        pooled = h if pooled is None else pooled + h
    pooled = pooled / len(ys)
    b = dense_ref(model.branch, pooled)
    t = dense_ref(model.trunk, np.atleast_1d(xq))
    return sum(bi * ti for bi, ti in zip(b, t)) + model.b0[0]


def central_difference(f, params, step=1e-5):
    """Gradient of scalar ``f()`` w.r.t. every entry of the arrays in ``params``.

    Perturbs the arrays in place and restores them afterwards.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            fp = f()
            flat[k] = old - step
            fm = f()
            flat[k] = old
            gflat[k] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def relative_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def ols_normal_equations(xs, ys):
    """OLS through the origin via explicit sums (the d=1 closed form for d=1)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[0] == len(ys) and xs.shape[1] == 1:
        sxx = sum(float(x[0]) ** 2 for x in xs)
        sxy = sum(float(x[0]) * float(y) for x, y in zip(xs, ys))
        return np.array([sxy / sxx])
    return np.linalg.solve(xs.T @ xs, xs.T @ np.asarray(ys, dtype=float))
