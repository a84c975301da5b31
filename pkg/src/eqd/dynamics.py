"""Benchmark ODE systems and their known-equation restrictions.

Two systems are compiled in: a three-species Lotka-Volterra model and a
five-mode Lorenz model.  Each is registered under a name in ``SYSTEMS`` so
the solver and the hybrid model can look them up without knowing the
equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "InvalidInputError",
    "InvalidConfigError",
    "NumericError",
    "SystemDef",
    "SystemSpec",
    "ObservationMask",
    "SYSTEMS",
    "register_system",
    "get_system",
    "lv3_rhs",
    "lorenz5_rhs",
    "full_rhs",
    "partial_rhs",
    "as_state",
]


class InvalidInputError(ValueError):
    """Array shapes or values do not match what an operation expects."""


class InvalidConfigError(ValueError):
    """A configuration is internally inconsistent."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


def as_state(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a 1-D float state vector."""
    state = np.asarray(values, dtype=float)
    if state.ndim != 1:
        raise InvalidInputError(f"state must be 1-D, got shape {state.shape}")
    if dim is not None and state.shape[0] != dim:
        raise InvalidInputError(f"state has dim {state.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(state)):
        raise NumericError(f"state contains non-finite entries: {state}")
    return state


# --- raw right-hand sides ----------------------------------------------------
# Parameters arrive as a tuple in the order of SystemDef.param_names.  These
# skip validation; they sit inside solver loops.

def _lv3(u, p):
    x, y, z = u[0], u[1], u[2]
    a, b, c, d, e, f, g = p
    return np.array([
        a * x - b * x * y,
        -c * y + d * x * y - e * y * z,
        -f * z + g * y * z,
    ])


def _lv3_jac(u, p):
    x, y, z = u[0], u[1], u[2]
    a, b, c, d, e, f, g = p
    return np.array([
        [a - b * y, -b * x, 0.0],
        [d * y, -c + d * x - e * z, -e * y],
        [0.0, g * z, -f + g * y],
    ])


def _lorenz5(u, p):
    x, y, z, v, w = u[0], u[1], u[2], u[3], u[4]
    sigma, rho, beta = p
    return np.array([
        sigma * (y - x),
        x * (rho - z) - y,
        x * y - beta * z - x * v,
        x * z - 2.0 * x * w - (1.0 + 2.0 * beta) * v,
        2.0 * x * v - 4.0 * beta * w,
    ])


def _lorenz5_jac(u, p):
    x, y, z, v, w = u[0], u[1], u[2], u[3], u[4]
    sigma, rho, beta = p
    return np.array([
        [-sigma, sigma, 0.0, 0.0, 0.0],
        [rho - z, -1.0, -x, 0.0, 0.0],
        [y - v, x, -beta, -x, 0.0],
        [z - 2.0 * w, 0.0, x, -(1.0 + 2.0 * beta), -2.0 * x],
        [2.0 * v, 0.0, 0.0, 2.0 * x, -4.0 * beta],
    ])


@dataclass(frozen=True)
class SystemDef:
    """A registered ODE system.

    ``rhs(u, p)`` and ``jac(u, p)`` take the state and a parameter tuple
    ordered as ``param_names``.  ``jac`` is the state Jacobian, needed for
    reverse-mode differentiation through the solver.
    """

    name: str
    dim: int
    var_names: tuple[str, ...]
    param_names: tuple[str, ...]
    default_params: Mapping[str, float]
    default_ic: tuple[float, ...]
    sample_dt: float
    rhs: Callable[[np.ndarray, tuple], np.ndarray]
    jac: Callable[[np.ndarray, tuple], np.ndarray]
    equations: tuple[str, ...] = ()


SYSTEMS: dict[str, SystemDef] = {}


def register_system(sysdef: SystemDef) -> SystemDef:
    if sysdef.name in SYSTEMS:
        raise InvalidConfigError(f"system {sysdef.name!r} already registered")
    if len(sysdef.var_names) != sysdef.dim or len(sysdef.default_ic) != sysdef.dim:
        raise InvalidConfigError(f"system {sysdef.name!r}: dim mismatch")
    SYSTEMS[sysdef.name] = sysdef
    return sysdef


def get_system(name: str) -> SystemDef:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise InvalidConfigError(
            f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None


register_system(SystemDef(
    name="LotkaVolterra3",
    dim=3,
    var_names=("x", "y", "z"),
    param_names=("a", "b", "c", "d", "e", "f", "g"),
    default_params={k: 1.0 for k in "abcdefg"},
    default_ic=(0.5, 1.0, 2.0),
    sample_dt=0.05,
    rhs=_lv3,
    jac=_lv3_jac,
    equations=("a*x - b*x*y", "-c*y + d*x*y - e*y*z", "-f*z + g*y*z"),
))

register_system(SystemDef(
    name="Lorenz5",
    dim=5,
    var_names=("x", "y", "z", "v", "w"),
    param_names=("sigma", "rho", "beta"),
    default_params={"sigma": 10.0, "rho": 35.0, "beta": 8.0 / 3.0},
    default_ic=(-8.0, 8.0, 27.0, 0.4, 0.5),
    sample_dt=0.01,
    rhs=_lorenz5,
    jac=_lorenz5_jac,
    equations=(
        "sigma*(y - x)",
        "x*(rho - z) - y",
        "x*y - beta*z - x*v",
        "x*z - 2*x*w - (1 + 2*beta)*v",
        "2*x*v - 4*beta*w",
    ),
))


@dataclass(frozen=True)
class SystemSpec:
    """A system name with concrete parameters and initial condition."""

    name: str
    params: Mapping[str, float] = field(default_factory=dict)
    initial_condition: tuple[float, ...] = ()

    def __post_init__(self):
        sysdef = get_system(self.name)
        params = dict(sysdef.default_params) if not self.params else dict(self.params)
        if set(params) != set(sysdef.param_names):
            raise InvalidConfigError(
                f"{self.name} expects parameters {sorted(sysdef.param_names)}, "
                f"got {sorted(params)}")
        params = {k: float(params[k]) for k in sysdef.param_names}
        ic = self.initial_condition or sysdef.default_ic
        ic = tuple(float(v) for v in as_state(ic, sysdef.dim))
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "initial_condition", ic)

    @property
    def sysdef(self) -> SystemDef:
        return get_system(self.name)

    @property
    def dim(self) -> int:
        return self.sysdef.dim

    @property
    def param_tuple(self) -> tuple[float, ...]:
        return tuple(self.params[k] for k in self.sysdef.param_names)

    def rhs(self, state) -> np.ndarray:
        return full_rhs(self, state)


@dataclass(frozen=True)
class ObservationMask:
    observed: tuple[bool, ...]

    def __post_init__(self):
        obs = tuple(bool(v) for v in self.observed)
        if not obs or not any(obs):
            raise InvalidConfigError("at least one state must be observed")
        object.__setattr__(self, "observed", obs)

    @classmethod
    def hiding(cls, dim: int, hidden: Sequence[int]) -> "ObservationMask":
        hidden = set(hidden)
        return cls(tuple(i not in hidden for i in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.observed)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)

    def as_array(self) -> np.ndarray:
        return np.array(self.observed, dtype=bool)


def _param_tuple(sysdef: SystemDef, params: Mapping[str, float] | None) -> tuple:
    if params is None:
        params = sysdef.default_params
    missing = [k for k in sysdef.param_names if k not in params]
    if missing:
        raise InvalidInputError(f"{sysdef.name} missing parameters {missing}")
    return tuple(float(params[k]) for k in sysdef.param_names)


def lv3_rhs(state, params: Mapping[str, float] | None = None) -> np.ndarray:
    """Lotka-Volterra derivatives ``(ax - bxy, -cy + dxy - eyz, -fz + gyz)``."""
    sysdef = SYSTEMS["LotkaVolterra3"]
    return _lv3(as_state(state, 3), _param_tuple(sysdef, params))


def lorenz5_rhs(state, params: Mapping[str, float] | None = None) -> np.ndarray:
    """Derivatives of the five-mode Lorenz system."""
    sysdef = SYSTEMS["Lorenz5"]
    return _lorenz5(as_state(state, 5), _param_tuple(sysdef, params))


def full_rhs(spec: SystemSpec, state) -> np.ndarray:
    return spec.sysdef.rhs(as_state(state, spec.dim), spec.param_tuple)


def _check_unknown(dim: int, unknown_indices) -> tuple[int, ...]:
    unknown = tuple(sorted(set(int(i) for i in unknown_indices)))
    if any(i < 0 or i >= dim for i in unknown):
        raise InvalidConfigError(f"unknown indices {unknown} out of range for dim {dim}")
    if len(unknown) == dim:
        raise InvalidConfigError("every equation is unknown; no known equations remain")
    return unknown


def partial_rhs(spec: SystemSpec, state, unknown_indices) -> dict[int, float]:
    """Derivatives of the known equations only.

    Returns a mapping from state index to derivative; indices listed in
    ``unknown_indices`` are absent.
    """
    unknown = _check_unknown(spec.dim, unknown_indices)
    full = full_rhs(spec, state)
    return {i: float(full[i]) for i in range(spec.dim) if i not in unknown}
