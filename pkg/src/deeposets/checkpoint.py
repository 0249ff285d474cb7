"""Self-describing text checkpoints.

A checkpoint is a JSON document: format tag and version, the model config,
the RNG seed, training metadata, then every subnetwork's parameters as
row-major float arrays written with 17 significant digits (exact round trip).
Optionally it carries the Adam state so training can resume bit-for-bit.
Writing is deterministic, so load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np

from .model import DeepOSetsModel, ModelConfig
from .nn import AdamState, DenseLayer, DenseNet

FORMAT_NAME = "deeposets-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


def _fmt_float(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x}")
    s = "%.17g" % x
    if not any(c in s for c in ".en"):
        s += ".0"  # keep it a JSON float, including the sign of -0.0
    return s


def _dump(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, np.ndarray):
        return "[" + ", ".join(_fmt_float(v) for v in obj.ravel()) + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, str, bool)) for v in obj):
            return "[" + ", ".join(_dump(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _net_record(net: DenseNet):
    return [
        {
            "activation": layer.activation.value,
            "shape": [layer.out_dim, layer.in_dim],
            "weights": layer.weights,
            "bias": layer.bias,
        }
        for layer in net.layers
    ]


def checkpoint_document(model: DeepOSetsModel, seed=0, metadata=None, optimizer=None) -> dict:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(seed),
        "metadata": dict(metadata or {}),
        "parameters": {name: _net_record(net) for name, net in model.subnets()},
    }
    doc["parameters"]["b0"] = model.b0
    if optimizer is not None:
        doc["optimizer"] = {
            "step": optimizer.step,
            "base_lr": optimizer.base_lr,
            "decay_rate": optimizer.decay_rate,
            "decay_steps": optimizer.decay_steps,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "m": list(optimizer.m),
            "v": list(optimizer.v),
        }
    return doc


def dumps_checkpoint(model, seed=0, metadata=None, optimizer=None) -> str:
    return _dump(checkpoint_document(model, seed, metadata, optimizer)) + "\n"


def save_checkpoint(model, path, seed=0, metadata=None, optimizer=None) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the written bytes."""
    text = dumps_checkpoint(model, seed, metadata, optimizer)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return hashlib.sha256(text.encode()).hexdigest()


class Checkpoint:
    """A loaded checkpoint: model plus everything stored alongside it."""

    def __init__(self, model, seed, metadata, optimizer, sha256):
        self.model = model
        self.seed = seed
        self.metadata = metadata
        self.optimizer = optimizer
        self.sha256 = sha256


def _array(values, shape, where):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"{where}: expected {int(np.prod(shape))} values, found {arr.size}")
    return arr.reshape(shape)


def _load_net(records, where):
    layers = []
    for i, r in enumerate(records):
        out_dim, in_dim = r["shape"]
        w = _array(r["weights"], (out_dim, in_dim), f"{where}[{i}].weights")
        b = _array(r["bias"], (out_dim,), f"{where}[{i}].bias")
        layers.append(DenseLayer(w, b, r["activation"]))
    return DenseNet(layers)


def loads_checkpoint(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise CheckpointError("not a deeposets checkpoint")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {doc.get('version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(doc["config"])
        params = doc["parameters"]
        nets = [_load_net(params[name], name) for name in DeepOSetsModel.SUBNETS]
        model = DeepOSetsModel(config, *nets, b0=_array(params["b0"], (1,), "b0")[0])
        optimizer = None
        if "optimizer" in doc:
            o = doc["optimizer"]
            shapes = [p.shape for p in model.parameters()]
            optimizer = AdamState(
                m=[_array(v, s, "optimizer.m") for v, s in zip(o["m"], shapes)],
                v=[_array(v, s, "optimizer.v") for v, s in zip(o["v"], shapes)],
                step=int(o["step"]),
                base_lr=float(o["base_lr"]),
                decay_rate=float(o["decay_rate"]),
                decay_steps=int(o["decay_steps"]),
                beta1=float(o["beta1"]),
                beta2=float(o["beta2"]),
                eps=float(o["eps"]),
            )
            if len(optimizer.m) != len(shapes) or len(optimizer.v) != len(shapes):
                raise CheckpointError("optimizer state does not match the model")
        return Checkpoint(model, int(doc["seed"]), doc["metadata"], optimizer,
                          hashlib.sha256(text.encode()).hexdigest())
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc!r}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: not a text checkpoint") from exc
    return loads_checkpoint(text)


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
