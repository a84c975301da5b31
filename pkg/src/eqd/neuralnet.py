"""Fully connected gelu networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector.  The layout is layer by layer,
and within a layer the weight matrix (``fan_out x fan_in``, row-major)
comes before the bias vector.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import InvalidInputError

__all__ = [
    "MLPSpec", "Network", "gelu", "gelu_grad", "forward", "backward",
    "init_params", "unflatten", "flatten", "save_checkpoint", "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "eqd-mlp/1"

_K = math.sqrt(2.0 / math.pi)
_C = 0.044715


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + np.tanh(_K * (x + _C * x ** 3)))


def gelu_grad(x):
    x = np.asarray(x, dtype=float)
    t = np.tanh(_K * (x + _C * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _K * (1.0 + 3.0 * _C * x * x)


def _gelu_and_grad(z):
    z2 = z * z
    t = np.tanh(_K * z * (1.0 + _C * z2))
    half = 0.5 * (1.0 + t)
    return z * half, half + 0.5 * z * (1.0 - t * t) * _K * (1.0 + 3.0 * _C * z2)


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "gelu_tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise InvalidInputError(f"layer widths must be positive: {self}")
        if self.activation != "gelu_tanh":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` of each affine layer."""
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(fo * fi + fo for fo, fi in self.shapes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": self.activation}


def unflatten(spec: MLPSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copies)."""
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.n_params,):
        raise InvalidInputError(
            f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    pos = 0
    for fo, fi in spec.shapes:
        W = params[pos:pos + fo * fi].reshape(fo, fi)
        pos += fo * fi
        b = params[pos:pos + fo]
        pos += fo
        layers.append((W, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


class Network:
    """A network bound to one parameter vector.

    Used by the hybrid model, which evaluates the same parameters many times
    per loss and needs the forward cache for the backward sweep.
    """

    def __init__(self, spec: MLPSpec, params):
        self.spec = spec
        self.params = np.asarray(params, dtype=float)
        self.layers = unflatten(spec, self.params)
        self._last = len(self.layers) - 1

    def __call__(self, x):
        a = x
        for i, (W, b) in enumerate(self.layers):
            z = a @ W.T + b
            a = z if i == self._last else 0.5 * z * (1.0 + np.tanh(_K * z * (1.0 + _C * z * z)))
        return a

    def forward_cached(self, x: np.ndarray):
        """Forward pass for one input vector, keeping what backward needs."""
        acts = [x]
        derivs = []
        a = x
        for i, (W, b) in enumerate(self.layers):
            z = W @ a + b
            if i == self._last:
                a = z
            else:
                a, d = _gelu_and_grad(z)
                derivs.append(d)
            acts.append(a)
        return a, (acts, derivs)

    def backward_cached(self, cache, upstream: np.ndarray, grad_layers=None):
        """Input gradient for one cached forward pass.

        Parameter gradients are accumulated into ``grad_layers`` (a list of
        ``(dW, db)`` views) when given.
        """
        acts, derivs = cache
        g = upstream
        for i in range(self._last, -1, -1):
            W = self.layers[i][0]
            if i != self._last:
                g = g * derivs[i]
            if grad_layers is not None:
                dW, db = grad_layers[i]
                dW += np.outer(g, acts[i])
                db += g
            g = W.T @ g
        return g


def _as_input(spec: MLPSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (spec.input_dim,) or x.ndim > 2:
        raise InvalidInputError(
            f"input shape {x.shape} does not match input_dim={spec.input_dim}")
    return x


def forward(spec: MLPSpec, params, x) -> np.ndarray:
    """Network output for one input vector or a batch of rows."""
    return Network(spec, params)(_as_input(spec, x))


def backward(spec: MLPSpec, params, x, upstream_grad):
    """Gradients of ``upstream_grad . forward(x)``.

    Returns ``(input_grad, param_grad)``.  For a batch of inputs the
    parameter gradient is summed over rows and ``input_grad`` has one row
    per input.
    """
    x = _as_input(spec, x)
    g_out = np.asarray(upstream_grad, dtype=float)
    if g_out.shape != x.shape[:-1] + (spec.output_dim,):
        raise InvalidInputError(
            f"upstream_grad shape {g_out.shape} does not match output_dim={spec.output_dim}")
    net = Network(spec, params)
    grad = np.zeros(spec.n_params)
    grad_layers = unflatten(spec, grad)
    if x.ndim == 1:
        _, cache = net.forward_cached(x)
        return net.backward_cached(cache, g_out, grad_layers), grad

    # batched: same recursion with rows as samples
    acts, derivs = [x], []
    a = x
    for i, (W, b) in enumerate(net.layers):
        z = a @ W.T + b
        if i == net._last:
            a = z
        else:
            a, d = _gelu_and_grad(z)
            derivs.append(d)
        acts.append(a)
    g = g_out
    for i in range(net._last, -1, -1):
        W = net.layers[i][0]
        if i != net._last:
            g = g * derivs[i]
        dW, db = grad_layers[i]
        dW += g.T @ acts[i]
        db += g.sum(axis=0)
        g = g @ W
    return g, grad


def init_params(spec: MLPSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for (W, b), (fo, fi) in zip(unflatten(spec, params), spec.shapes):
        limit = math.sqrt(6.0 / (fi + fo))
        W[...] = rng.uniform(-limit, limit, size=(fo, fi))
    return params


def save_checkpoint(path, spec: MLPSpec, params, **extra) -> dict:
    """JSON checkpoint; floats are written with ``repr`` so they round-trip exactly."""
    params = np.asarray(params, dtype=float)
    doc = {"format": CHECKPOINT_FORMAT, **spec.to_dict(),
           "params": [float(v) for v in params], **extra}
    if path is not None:
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(doc))
    return doc


def load_checkpoint(path_or_doc) -> tuple[MLPSpec, np.ndarray, dict]:
    if isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        with open(path_or_doc) as fh:
            doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"unsupported checkpoint format {doc.get('format')!r}")
    spec = MLPSpec(doc["input_dim"], tuple(doc["hidden"]), doc["output_dim"],
                   doc.get("activation", "gelu_tanh"))
    params = np.array(doc["params"], dtype=float)
    if params.shape != (spec.n_params,):
        raise InvalidInputError("checkpoint parameter count does not match its spec")
    extra = {k: v for k, v in doc.items()
             if k not in {"format", "input_dim", "hidden", "output_dim", "activation", "params"}}
    return spec, params, extra
