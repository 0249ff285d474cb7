"""DeepOSets: a DeepSets encoder feeding the branch of a DeepONet.

For a prompt of n examples (x_i, y_i) and a query point x_q::

    e_i  = [Ex x_i + cx, Ey pad(y_i) + cy]        pair embedding
    h_i  = encoder(e_i)                            per-example features
    h    = mean_i h_i                              permutation-invariant pooling
    b    = branch(h)                               p coefficients
    t    = trunk(x_q)                              p basis values
    pred = b . t + b0

The branch output depends only on the prompt, so it can be computed once
(:class:`BranchCache`) and reused for any number of queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .nn import (
    Activation,
    DenseNet,
    DimensionError,
    GradientTape,
    TraceError,
    backward,
    forward,
    init_net,
)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    embed_width: int  # per stream; the pair embedding has 2 * embed_width outputs
    encoder_hidden: tuple[int, ...]
    pooled_dim: int
    branch_hidden: tuple[int, ...]
    trunk_hidden: tuple[int, ...]
    readout_width: int
    encoder_activation: str = "selu"
    branch_activation: str = "tanh"
    trunk_activation: str = "tanh"
    trunk_output_activation: str = "tanh"

    def __post_init__(self):
        for name in ("encoder_hidden", "branch_hidden", "trunk_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        widths = [self.input_dim, self.embed_width, self.pooled_dim, self.readout_width]
        widths += [*self.encoder_hidden, *self.branch_hidden, *self.trunk_hidden]
        if any(w <= 0 for w in widths):
            raise ValueError(f"all widths must be positive: {self}")
        for name in ("encoder_activation", "branch_activation", "trunk_activation",
                     "trunk_output_activation"):
            Activation(getattr(self, name))

    @property
    def encoder_sizes(self):
        return [2 * self.embed_width, *self.encoder_hidden, self.pooled_dim]

    @property
    def branch_sizes(self):
        return [self.pooled_dim, *self.branch_hidden, self.readout_width]

    @property
    def trunk_sizes(self):
        return [self.input_dim, *self.trunk_hidden, self.readout_width]

    @property
    def parameter_count(self) -> int:
        def count(sizes):
            return sum(o * (i + 1) for i, o in zip(sizes[:-1], sizes[1:]))

        embed = 2 * self.embed_width * (self.input_dim + 1)
        return (embed + count(self.encoder_sizes) + count(self.branch_sizes)
                + count(self.trunk_sizes) + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_hidden", "branch_hidden", "trunk_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def build_paper_config(d: int) -> ModelConfig:
    """The two published hyperparameter settings (d=1 and d=5)."""
    if d == 1:
        return ModelConfig(
            input_dim=1,
            embed_width=5,
            encoder_hidden=(50,) * 5,
            pooled_dim=400,
            branch_hidden=(40,) * 4,
            trunk_hidden=(40,) * 4,
            readout_width=100,
        )
    if d == 5:
        # depth of branch/trunk chosen so the total matches the published 0.57M
        return ModelConfig(
            input_dim=5,
            embed_width=15,
            encoder_hidden=(200,),
            pooled_dim=800,
            branch_hidden=(200,) * 3,
            trunk_hidden=(200,) * 3,
            readout_width=200,
        )
    raise ValueError(f"no preset for d={d}; build a ModelConfig directly")


class Prompt:
    """A set of in-context examples: ``xs`` is (n, d), ``ys`` is (n,)."""

    def __init__(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.ndim == 1:
            xs = xs[:, None]
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise DimensionError(
                f"prompt needs xs of shape (n, d) and ys of shape (n,), got {xs.shape} and {ys.shape}"
            )
        if xs.shape[0] < 1:
            raise ValueError("a prompt needs at least one example")
        self.xs = xs
        self.ys = ys

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("a prompt needs at least one example")
        xs = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for x, _ in pairs]
        dims = {x.shape for x in xs}
        if len(dims) != 1:
            raise DimensionError(f"examples have mixed dimensions {sorted(dims)}")
        return cls(np.stack(xs), [float(y) for _, y in pairs])

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    def __len__(self):
        return self.n

    def permuted(self, order) -> "Prompt":
        order = np.asarray(order)
        return Prompt(self.xs[order], self.ys[order])

    def canonical_order(self):
        """Lexicographic order on (x_1, ..., x_d, y); identical rows tie harmlessly."""
        keys = [self.ys] + [self.xs[:, j] for j in range(self.d - 1, -1, -1)]
        return np.lexsort(keys)

    def canonical(self) -> "Prompt":
        return self.permuted(self.canonical_order())


@dataclass(frozen=True)
class BranchCache:
    coefficients: np.ndarray  # (p,)
    b0: float

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "b0", float(self.b0))


class DeepOSetsModel:
    def __init__(self, config: ModelConfig, x_embed: DenseNet, y_embed: DenseNet,
                 encoder: DenseNet, branch: DenseNet, trunk: DenseNet, b0=0.0):
        self.config = config
        self.x_embed = x_embed
        self.y_embed = y_embed
        self.encoder = encoder
        self.branch = branch
        self.trunk = trunk
        self.b0 = np.array([float(np.asarray(b0).reshape(-1)[0])])
        self._check()

    def _check(self):
        c = self.config
        expected = {
            "x_embed": [c.input_dim, c.embed_width],
            "y_embed": [c.input_dim, c.embed_width],
            "encoder": c.encoder_sizes,
            "branch": c.branch_sizes,
            "trunk": c.trunk_sizes,
        }
        for name, sizes in expected.items():
            net = getattr(self, name)
            got = [net.in_dim] + [layer.out_dim for layer in net.layers]
            if got != sizes:
                raise DimensionError(f"{name} has sizes {got}, config says {sizes}")
        if self.branch.layers[-1].activation is not Activation.IDENTITY:
            raise ValueError("the branch output layer must be linear")

    @classmethod
    def initialize(cls, config: ModelConfig, seed=0) -> "DeepOSetsModel":
        rng = np.random.default_rng(seed)
        c = config
        x_embed = init_net([c.input_dim, c.embed_width], "identity", rng=rng)
        y_embed = init_net([c.input_dim, c.embed_width], "identity", rng=rng)
        n_enc = len(c.encoder_sizes) - 1
        encoder = init_net(c.encoder_sizes, [c.encoder_activation] * (n_enc - 1) + ["identity"],
                           rng=rng)
        n_br = len(c.branch_sizes) - 1
        branch = init_net(c.branch_sizes, [c.branch_activation] * (n_br - 1) + ["identity"],
                          rng=rng)
        n_tr = len(c.trunk_sizes) - 1
        trunk = init_net(c.trunk_sizes,
                         [c.trunk_activation] * (n_tr - 1) + [c.trunk_output_activation],
                         rng=rng)
        return cls(config, x_embed, y_embed, encoder, branch, trunk, 0.0)

    SUBNETS = ("x_embed", "y_embed", "encoder", "branch", "trunk")

    def subnets(self):
        return [(name, getattr(self, name)) for name in self.SUBNETS]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for _, net in self.subnets():
            params.extend(net.parameters())
        params.append(self.b0)
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    def copy(self) -> "DeepOSetsModel":
        return DeepOSetsModel(self.config, *(net.copy() for _, net in self.subnets()),
                              b0=self.b0[0])

    def zero_gradients(self) -> "ModelGradients":
        return ModelGradients({name: GradientTape.for_net(net) for name, net in self.subnets()},
                              np.zeros(1))


@dataclass
class ModelGradients:
    tapes: dict
    b0: np.ndarray
    # d(loss)/d(prompt x_i) and d(loss)/d(y_i) from the latest backward pass
    example_x: np.ndarray | None = None
    example_y: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for name in DeepOSetsModel.SUBNETS:
            out.extend(self.tapes[name].arrays())
        out.append(self.b0)
        return out

    def zero(self):
        for t in self.tapes.values():
            t.zero()
        self.b0.fill(0.0)


@dataclass
class BatchTrace:
    model_id: int
    n: int
    traces: dict = field(default_factory=dict)
    branch_out: np.ndarray = None  # (B, p)
    trunk_out: np.ndarray = None  # (B, q, p)


def _pad_labels(ys, d):
    """Append zeros so each label is a length-d vector."""
    out = np.zeros(ys.shape + (d,))
    out[..., 0] = ys
    return out


def forward_batch(model: DeepOSetsModel, xs, ys, queries, return_trace=False):
    """Predictions for a batch of prompts sharing the same length n.

    xs: (B, n, d), ys: (B, n), queries: (B, q, d). Returns (B, q).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    d = model.input_dim
    if xs.ndim != 3 or xs.shape[2] != d or ys.shape != xs.shape[:2]:
        raise DimensionError(f"expected xs (B, n, {d}) and ys (B, n); got {xs.shape}, {ys.shape}")
    if queries.ndim != 3 or queries.shape[2] != d or queries.shape[0] != xs.shape[0]:
        raise DimensionError(f"expected queries (B, q, {d}); got {queries.shape}")
    B, n, _ = xs.shape
    if n < 1:
        raise ValueError("prompts need at least one example")
    q = queries.shape[1]
    tr = {}

    def run(name, inp):
        net = getattr(model, name)
        if return_trace:
            out, tr[name] = forward(net, inp, return_trace=True)
            return out
        return forward(net, inp)

    ex = run("x_embed", xs.reshape(B * n, d))
    ey = run("y_embed", _pad_labels(ys, d).reshape(B * n, d))
    h = run("encoder", np.concatenate([ex, ey], axis=1))
    pooled = h.reshape(B, n, -1).mean(axis=1)
    coeffs = run("branch", pooled)
    basis = run("trunk", queries.reshape(B * q, d)).reshape(B, q, -1)
    preds = np.einsum("bqp,bp->bq", basis, coeffs) + model.b0[0]
    if return_trace:
        return preds, BatchTrace(id(model), n, tr, coeffs, basis)
    return preds


def backward_batch(model: DeepOSetsModel, trace: BatchTrace, dpreds, grads=None):
    """Accumulate d(loss)/d(params) given d(loss)/d(preds) of shape (B, q)."""
    if not isinstance(trace, BatchTrace) or trace.model_id != id(model):
        raise TraceError("backward_batch needs the trace from forward_batch on this model")
    if grads is None:
        grads = model.zero_gradients()
    dpreds = np.asarray(dpreds, dtype=np.float64)
    B, q, p = trace.trunk_out.shape
    if dpreds.shape != (B, q):
        raise DimensionError(f"upstream gradient has shape {dpreds.shape}, expected {(B, q)}")
    n = trace.n
    t = grads.tapes

    grads.b0 += dpreds.sum()
    d_coeffs = np.einsum("bq,bqp->bp", dpreds, trace.trunk_out)
    d_basis = dpreds[:, :, None] * trace.branch_out[:, None, :]
    backward(model.trunk, trace.traces["trunk"], d_basis.reshape(B * q, p), t["trunk"])
    d_pooled = backward(model.branch, trace.traces["branch"], d_coeffs, t["branch"])
    # mean pooling sends upstream / n to every example
    d_h = np.repeat(d_pooled / n, n, axis=0)
    d_e = backward(model.encoder, trace.traces["encoder"], d_h, t["encoder"])
    e = model.config.embed_width
    dx = backward(model.x_embed, trace.traces["x_embed"], d_e[:, :e], t["x_embed"])
    dy = backward(model.y_embed, trace.traces["y_embed"], d_e[:, e:], t["y_embed"])
    grads.example_x = dx.reshape(B, n, -1)
    grads.example_y = dy[:, 0].reshape(B, n)
    return grads


def _check_prompt(model, prompt):
    if not isinstance(prompt, Prompt):
        prompt = Prompt(*prompt)
    if prompt.d != model.input_dim:
        raise DimensionError(
            f"prompt examples have dimension {prompt.d}, model expects {model.input_dim}"
        )
    return prompt


def encode_prompt(model: DeepOSetsModel, prompt: Prompt, canonical=True):
    """Mean of the per-example encoder features, shape (pooled_dim,).

    With ``canonical=True`` the examples are put in a fixed order first, so any
    permutation of the prompt gives a bit-identical result.
    """
    prompt = _check_prompt(model, prompt)
    if canonical:
        prompt = prompt.canonical()
    d = model.input_dim
    ex = forward(model.x_embed, prompt.xs)
    ey = forward(model.y_embed, _pad_labels(prompt.ys, d))
    h = forward(model.encoder, np.concatenate([ex, ey], axis=1))
    return h.mean(axis=0)


def branch_features(model: DeepOSetsModel, pooled) -> BranchCache:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (model.config.pooled_dim,):
        raise DimensionError(
            f"pooled vector has shape {pooled.shape}, expected ({model.config.pooled_dim},)"
        )
    return BranchCache(forward(model.branch, pooled), model.b0[0])


def predict(model: DeepOSetsModel, cache: BranchCache, x_query):
    """Evaluate the cached prediction function at one query (d,) or many (m, d)."""
    xq = np.asarray(x_query, dtype=np.float64)
    if xq.ndim == 0:
        xq = xq.reshape(1)
    if xq.shape[-1] != model.input_dim or xq.ndim > 2:
        raise DimensionError(f"query has shape {xq.shape}, model expects dimension {model.input_dim}")
    if cache.coefficients.shape != (model.config.readout_width,):
        raise DimensionError("branch cache does not match this model's readout width")
    basis = forward(model.trunk, xq)
    out = basis @ cache.coefficients + cache.b0
    return float(out) if xq.ndim == 1 else out


def predict_full(model: DeepOSetsModel, prompt: Prompt, x_query, canonical=True):
    cache = branch_features(model, encode_prompt(model, prompt, canonical=canonical))
    return predict(model, cache, x_query)


def model_gradients(model: DeepOSetsModel, prompt: Prompt, x_query, upstream=1.0):
    """Parameter gradients of ``upstream * predict_full(model, prompt, x_query)``."""
    prompt = _check_prompt(model, prompt)
    xq = np.asarray(x_query, dtype=np.float64).reshape(1, 1, -1)
    if xq.shape[2] != model.input_dim:
        raise DimensionError(f"query has dimension {xq.shape[2]}, expected {model.input_dim}")
    _, trace = forward_batch(model, prompt.xs[None], prompt.ys[None], xq, return_trace=True)
    return backward_batch(model, trace, np.array([[float(upstream)]]))
