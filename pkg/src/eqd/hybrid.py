"""Hybrid vector fields: known equations plus a network for the unknown ones.

The loss gradient is computed discretize-then-optimize: every Tsit5 stage
of the fixed-step forward solve is kept in memory and the exact adjoint of
that arithmetic is swept backwards.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import InvalidConfigError, InvalidInputError, ObservationMask, SystemSpec
from .neuralnet import MLPSpec, Network, unflatten
from .odesolver import _A, _B, SolverConfig, Trajectory, integrate

__all__ = [
    "HybridField", "DivergenceError", "hybrid_rhs", "masked_mse", "loss_and_grad",
    "simulate", "network_outputs", "DIVERGENCE_BOUND",
]

# States beyond this magnitude count as a diverged forward solve.
DIVERGENCE_BOUND = 1e8


class DivergenceError(ArithmeticError):
    """The hybrid forward solve produced non-finite or runaway states."""


@dataclass(frozen=True)
class HybridField:
    """Known equations of ``system`` with ``unknown_indices`` replaced by a network.

    The k-th network output drives the k-th smallest unknown index.  The
    network sees the full state.
    """

    system: SystemSpec
    unknown_indices: tuple[int, ...]
    net_spec: MLPSpec
    params: np.ndarray

    def __post_init__(self):
        unknown = tuple(sorted(set(int(i) for i in self.unknown_indices)))
        dim = self.system.dim
        if any(i < 0 or i >= dim for i in unknown):
            raise InvalidConfigError(f"unknown indices {unknown} out of range")
        if len(unknown) == dim:
            raise InvalidConfigError("at least one equation must stay known")
        if self.net_spec.input_dim != dim:
            raise InvalidConfigError(
                f"network input_dim {self.net_spec.input_dim} != system dim {dim}")
        if self.net_spec.output_dim != max(len(unknown), 1):
            raise InvalidConfigError(
                f"network output_dim {self.net_spec.output_dim} != "
                f"{len(unknown)} unknown equations")
        params = np.asarray(self.params, dtype=float)
        if params.shape != (self.net_spec.n_params,):
            raise InvalidInputError("parameter vector does not match network spec")
        object.__setattr__(self, "unknown_indices", unknown)
        object.__setattr__(self, "params", params)

    def with_params(self, params) -> "HybridField":
        return HybridField(self.system, self.unknown_indices, self.net_spec, params)

    @property
    def dim(self) -> int:
        return self.system.dim

    def evaluator(self) -> "_Evaluator":
        return _Evaluator(self)

    def __call__(self, state) -> np.ndarray:
        return _Evaluator(self)(np.asarray(state, dtype=float))


class _Evaluator:
    """Unchecked fast path over a HybridField, used inside solver loops."""

    def __init__(self, field: HybridField):
        sysdef = field.system.sysdef
        self.rhs = sysdef.rhs
        self.jac = sysdef.jac
        self.p = field.system.param_tuple
        self.unknown = np.array(field.unknown_indices, dtype=int)
        self.has_net = len(self.unknown) > 0
        self.net = Network(field.net_spec, field.params)

    def __call__(self, y):
        d = self.rhs(y, self.p)
        if self.has_net:
            d[self.unknown] = self.net(y)
        return d

    def cached(self, y):
        d = self.rhs(y, self.p)
        if not self.has_net:
            return d, None
        out, cache = self.net.forward_cached(y)
        d[self.unknown] = out
        return d, cache

    def vjp(self, y, cache, v, grad_layers):
        """``v^T df/dy``; network parameter gradients go into ``grad_layers``."""
        if not self.has_net:
            return self.jac(y, self.p).T @ v
        vk = v.copy()
        vk[self.unknown] = 0.0
        g = self.jac(y, self.p).T @ vk
        return g + self.net.backward_cached(cache, v[self.unknown], grad_layers)


def hybrid_rhs(field: HybridField, state) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (field.dim,):
        raise InvalidInputError(f"state shape {state.shape}, expected ({field.dim},)")
    return field(state)


def network_outputs(field: HybridField, states) -> np.ndarray:
    """Network outputs for a batch of states, shape (n, n_unknown)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    return Network(field.net_spec, field.params)(states)


def masked_mse(pred: Trajectory, truth: Trajectory, mask: ObservationMask) -> float:
    """Mean squared error over observed channels and all samples."""
    if pred.states.shape != truth.states.shape:
        raise InvalidInputError(
            f"shape mismatch: {pred.states.shape} vs {truth.states.shape}")
    if not np.allclose(pred.times, truth.times, rtol=0, atol=1e-9):
        raise InvalidInputError("prediction and truth are sampled at different times")
    if mask.dim != truth.dim:
        raise InvalidInputError(f"mask length {mask.dim} != dim {truth.dim}")
    obs = mask.as_array()
    resid = pred.states[:, obs] - truth.states[:, obs]
    return float(np.mean(resid * resid))


def _uniform_dt(times: np.ndarray) -> float:
    if len(times) < 2:
        raise InvalidInputError("truth needs at least two samples in the window")
    steps = np.diff(times)
    dt = float(steps[0])
    if not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
        raise InvalidInputError("truth samples must be uniformly spaced")
    return dt


def loss_and_grad(field: HybridField, truth: Trajectory, mask: ObservationMask,
                  train_window: tuple[float, float], solver: SolverConfig,
                  y0=None, return_y0_grad: bool = False):
    """Masked MSE of a fixed-step hybrid solve against ``truth`` and its gradient.

    The solve starts at ``train_window[0]`` from ``y0`` (default: the truth
    sample there) and is compared against every truth sample in
    ``(t0, t1]``.  Returns ``(loss, grad)``, or ``(loss, grad, y0_grad)``
    when ``return_y0_grad`` is set.  A diverging solve returns ``inf`` and a
    zero gradient.
    """
    if solver.fixed_step is None:
        raise InvalidInputError("loss_and_grad needs a fixed-step solver config")
    if mask.dim != field.dim or truth.dim != field.dim:
        raise InvalidInputError("mask, truth and field dimensions must agree")
    t0, t1 = train_window
    window = truth.window(t0, t1)
    dt = _uniform_dt(window.times)
    if abs(window.times[0] - t0) > 1e-9 * max(1.0, abs(t0)):
        raise InvalidInputError("truth has no sample at the window start")
    target = window.states[1:]
    nsub = int(round(dt / solver.fixed_step))
    if nsub < 1 or abs(nsub * solver.fixed_step - dt) > 1e-9 * dt:
        raise InvalidInputError("fixed_step must divide the sampling interval")
    h = dt / nsub

    y = np.array(window.states[0] if y0 is None else y0, dtype=float)
    if y.shape != (field.dim,):
        raise InvalidInputError("y0 has the wrong dimension")
    obs = mask.as_array()
    n_samples = len(target)
    scale = 2.0 / (obs.sum() * n_samples)
    ev = field.evaluator()
    n_params = field.net_spec.n_params

    # forward, keeping every stage input and network cache
    tape = []
    pred = np.empty_like(target)
    with np.errstate(over="ignore", invalid="ignore"):
        k1, c1 = ev.cached(y)
        for n in range(n_samples):
            for _ in range(nsub):
                Ys, caches, ks = [y], [c1], [k1]
                for i in range(1, 6):
                    Yi = y
                    row = _A[i]
                    for j in range(i):
                        Yi = Yi + (h * row[j]) * ks[j]
                    ki, ci = ev.cached(Yi)
                    Ys.append(Yi)
                    caches.append(ci)
                    ks.append(ki)
                y = y + h * (_B[0] * ks[0] + _B[1] * ks[1] + _B[2] * ks[2]
                             + _B[3] * ks[3] + _B[4] * ks[4] + _B[5] * ks[5])
                if not (np.all(np.isfinite(y)) and np.max(np.abs(y)) < DIVERGENCE_BOUND):
                    return _diverged(n_params, field.dim, return_y0_grad)
                tape.append((Ys, caches))
                k1, c1 = ev.cached(y)
            pred[n] = y

    resid = (pred - target)[:, obs]
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        return _diverged(n_params, field.dim, return_y0_grad)

    # reverse sweep
    grad = np.zeros(n_params)
    grad_layers = unflatten(field.net_spec, grad)
    ybar = np.zeros(field.dim)
    step = len(tape)
    for n in range(n_samples - 1, -1, -1):
        seed = np.zeros(field.dim)
        seed[obs] = scale * (pred[n, obs] - target[n, obs])
        ybar = ybar + seed
        for _ in range(nsub):
            step -= 1
            Ys, caches = tape[step]
            kbar = [(h * _B[i]) * ybar for i in range(6)]
            for i in range(5, -1, -1):
                Ybar = ev.vjp(Ys[i], caches[i], kbar[i], grad_layers)
                ybar = ybar + Ybar
                row = _A[i]
                for j in range(i):
                    kbar[j] = kbar[j] + (h * row[j]) * Ybar
    if return_y0_grad:
        return loss, grad, ybar
    return loss, grad


def _diverged(n_params, dim, return_y0_grad):
    if return_y0_grad:
        return float("inf"), np.zeros(n_params), np.zeros(dim)
    return float("inf"), np.zeros(n_params)


def simulate(field: HybridField, y0, t_span: tuple[float, float], sample_dt: float,
             solver: SolverConfig | None = None) -> Trajectory:
    """Integrate the hybrid field; adaptive unless ``solver`` is fixed-step."""
    return integrate(field.evaluator(), y0, t_span, sample_dt, solver)
