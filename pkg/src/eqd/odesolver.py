"""Tsitouras 5(4) explicit Runge-Kutta integration with fixed-rate sampling.

The integrator steps exactly onto every sample time instead of
interpolating, so sample placement is reproducible bit for bit and the
same stepping loop can be differentiated in reverse mode (see
:mod:`eqd.hybrid`).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import InvalidInputError, NumericError

__all__ = [
    "TSIT5_C", "TSIT5_A", "TSIT5_B", "TSIT5_BTILDE",
    "SolverConfig", "Trajectory",
    "SolverError", "StepSizeError", "MaxStepsError", "BlowUpError",
    "tsit5_step", "adapt_step", "error_norm", "integrate", "sample_times",
]

# Tsitouras (2011) tableau.  B equals the last row of A (first-same-as-last),
# and BTILDE holds the difference between the 5th and 4th order weights.
TSIT5_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
TSIT5_A = np.zeros((7, 7))
TSIT5_A[1, :1] = [0.161]
TSIT5_A[2, :2] = [-0.008480655492356989, 0.335480655492357]
TSIT5_A[3, :3] = [2.897153057105493, -6.359448489975075, 4.3622954328695815]
TSIT5_A[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365,
                  -0.09249506636175525]
TSIT5_A[5, :5] = [5.86145544294642, -12.92096931784711, 8.159367898576159,
                  -0.071584973281401, -0.028269050394068383]
TSIT5_A[6, :6] = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
                  -3.290069515436081, 2.324710524099774]
TSIT5_B = TSIT5_A[6].copy()
TSIT5_BTILDE = np.array([
    -0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995,
    -0.1447110071732629, 0.5823571654525552, -0.45808210592918697,
    0.015151515151515152,
])

# Plain-float copies for the stage loops; indexing numpy arrays per stage is slow.
_A = [[float(v) for v in row[:i]] for i, row in enumerate(TSIT5_A)]
_B = [float(v) for v in TSIT5_B[:6]]
_BT = [float(v) for v in TSIT5_BTILDE]

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class SolverError(RuntimeError):
    """Integration stopped before reaching the end of the span."""

    def __init__(self, message: str, t: float):
        t = float(t)
        super().__init__(f"{message} (last reached t={t!r})")
        self.t = t
        # samples produced before the failure, filled in by ``integrate``
        self.partial: "Trajectory | None" = None
        self.filled = 1


class StepSizeError(SolverError):
    pass


class MaxStepsError(SolverError):
    pass


class BlowUpError(SolverError, NumericError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    initial_step: float = 1e-3
    max_steps: int = 10**7
    fixed_step: float | None = None

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise InvalidInputError("tolerances must be positive")
        if not self.initial_step > 0:
            raise InvalidInputError("initial_step must be positive")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be positive")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise InvalidInputError("fixed_step must be positive")

    @classmethod
    def fixed(cls, h: float) -> "SolverConfig":
        return cls(fixed_step=h)


@dataclass
class Trajectory:
    """States sampled at strictly increasing times; ``states`` is (n, dim)."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.times.ndim != 1:
            raise InvalidInputError("times must be 1-D and states 2-D")
        if len(self.times) != len(self.states):
            raise InvalidInputError(
                f"{len(self.times)} times but {len(self.states)} states")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise InvalidInputError("times must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return len(self.times)

    def window(self, t0: float, t1: float, *, include_start: bool = True) -> "Trajectory":
        """Samples with ``t0 <= t <= t1`` (``t0 < t`` when ``include_start`` is false)."""
        tol = 1e-9 * max(1.0, abs(t1))
        lo = self.times >= t0 - tol if include_start else self.times > t0 + tol
        keep = lo & (self.times <= t1 + tol)
        return Trajectory(self.times[keep], self.states[keep])

    def to_csv(self, path_or_buf=None, names: Sequence[str] | None = None) -> str | None:
        names = list(names) if names is not None else [f"x{i}" for i in range(self.dim)]
        if len(names) != self.dim:
            raise InvalidInputError("one column name per state is required")
        buf = io.StringIO()
        buf.write(",".join(["t", *names]) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(",".join(format(v, ".17g") for v in (t, *row)) + "\n")
        if path_or_buf is None:
            return buf.getvalue()
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(buf.getvalue())
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(buf.getvalue())
        return None

    @classmethod
    def from_csv(cls, path_or_buf) -> "Trajectory":
        if hasattr(path_or_buf, "read"):
            text = path_or_buf.read()
        else:
            with open(path_or_buf, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "t":
            raise InvalidInputError("trajectory CSV must start with a 't' column")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        data = data.reshape(-1, len(rows[0]))
        return cls(data[:, 0], data[:, 1:])

    @staticmethod
    def csv_header(path) -> list[str]:
        with open(path, newline="") as fh:
            return next(csv.reader(fh))


def sample_times(t0: float, t1: float, dt: float) -> np.ndarray:
    """``t0 + k*dt`` for k = 0..N, with the last sample within half a step of t1."""
    if not dt > 0:
        raise InvalidInputError("sample_dt must be positive")
    if t1 < t0:
        raise InvalidInputError("t_span must satisfy t1 >= t0")
    n = int(math.floor((t1 - t0) / dt + 0.5))
    return t0 + np.arange(n + 1) * dt


def _stages(field, y, h, k1):
    """Stages k1..k6 of one Tsit5 step and the 5th-order solution."""
    ks = [k1]
    for i in range(1, 6):
        acc = y
        row = _A[i]
        for j in range(i):
            acc = acc + (h * row[j]) * ks[j]
        ks.append(field(acc))
    y_next = y
    for j in range(6):
        y_next = y_next + (h * _B[j]) * ks[j]
    return ks, y_next


def tsit5_step(field: Callable, t: float, y, h: float, k1=None):
    """One Tsit5 step from ``y`` with step ``h``.

    Returns ``(y_next, err_est)``; ``err_est`` is the 5th minus the embedded
    4th-order solution.  ``t`` only labels errors, the field is autonomous.
    """
    if not h > 0:
        raise InvalidInputError("step size must be positive")
    y = np.asarray(y, dtype=float)
    y_next, err, _ = _tsit5_step(field, t, y, h, field(y) if k1 is None else k1)
    return y_next, err


def _tsit5_step(field, t, y, h, k1):
    ks, y_next = _stages(field, y, h, k1)
    if not np.all(np.isfinite(y_next)):
        raise BlowUpError("non-finite state in Tsit5 stage", t)
    k7 = field(y_next)
    err = h * (_BT[0] * ks[0] + _BT[1] * ks[1] + _BT[2] * ks[2] + _BT[3] * ks[3]
               + _BT[4] * ks[4] + _BT[5] * ks[5] + _BT[6] * k7)
    return y_next, err, k7


def error_norm(err_est, y, y_next, config: SolverConfig) -> float:
    scale = config.abs_tol + config.rel_tol * np.maximum(np.abs(y), np.abs(y_next))
    return float(np.sqrt(np.mean((np.asarray(err_est) / scale) ** 2)))


def adapt_step(err_est, y, y_next, h: float, config: SolverConfig) -> tuple[bool, float]:
    """Accept/reject a step and propose the next step size.

    The step is accepted when the weighted RMS error is at most one; the
    size changes by ``0.9 * norm**(-1/5)`` clamped to [0.2, 5].
    """
    norm = error_norm(err_est, y, y_next, config)
    if norm == 0.0:
        factor = MAX_FACTOR
    else:
        factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * norm ** -0.2))
    return norm <= 1.0, h * factor


def integrate(field: Callable, y0, t_span: tuple[float, float], sample_dt: float,
              config: SolverConfig | None = None) -> Trajectory:
    """Integrate an autonomous field and sample it every ``sample_dt``.

    Adaptive mode clips steps so that every sample time is hit exactly.
    Fixed mode (``config.fixed_step``) takes equal steps that divide
    ``sample_dt``.
    """
    config = config or SolverConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    times = sample_times(t0, t1, sample_dt)
    y = np.array(y0, dtype=float)
    if y.ndim != 1:
        raise InvalidInputError("y0 must be 1-D")
    if not np.all(np.isfinite(y)):
        raise BlowUpError("non-finite initial state", t0)
    k1 = np.asarray(field(y), dtype=float)
    if k1.shape != y.shape:
        raise InvalidInputError(f"field returned shape {k1.shape} for state {y.shape}")

    out = np.empty((len(times), len(y)))
    out[0] = y
    try:
        if config.fixed_step is not None:
            _integrate_fixed(field, y, k1, times, sample_dt, config, out)
        else:
            _integrate_adaptive(field, y, k1, times, config, out)
    except SolverError as exc:
        exc.partial = Trajectory(times[:exc.filled], out[:exc.filled])
        raise
    return Trajectory(times, out)


def _integrate_adaptive(field, y, k1, times, config, out):
    t = float(times[0])
    h = config.initial_step
    steps = 0
    for n in range(1, len(times)):
        target = times[n]
        try:
            while t < target:
                # stretch by up to 1% rather than leave a sliver before the sample
                clipped = t + 1.01 * h >= target
                h_step = target - t if clipped else h
                y_next, err, k7 = _tsit5_step(field, t, y, h_step, k1)
                steps += 1
                if steps > config.max_steps:
                    raise MaxStepsError(f"exceeded max_steps={config.max_steps}", t)
                accept, h_new = adapt_step(err, y, y_next, h_step, config)
                if accept:
                    if not np.all(np.isfinite(y_next)):
                        raise BlowUpError("non-finite state", t)
                    t = target if clipped else t + h_step
                    y, k1 = y_next, k7
                    h = max(h_new, h) if clipped else h_new
                else:
                    h = h_new
                    if h < 1e-14 * max(1.0, abs(t)):
                        raise StepSizeError("step size underflow", t)
        except SolverError as exc:
            exc.filled = n
            raise
        out[n] = y
    return out


def _integrate_fixed(field, y, k1, times, sample_dt, config, out):
    h = config.fixed_step
    nsub = int(round(sample_dt / h))
    if nsub < 1 or abs(nsub * h - sample_dt) > 1e-9 * sample_dt:
        raise InvalidInputError(
            f"fixed_step={h} does not divide sample_dt={sample_dt}")
    h = sample_dt / nsub
    for n in range(1, len(times)):
        t = times[n - 1]
        for _ in range(nsub):
            ks, y = _stages(field, y, h, k1)
            if not np.all(np.isfinite(y)):
                exc = BlowUpError("non-finite state", t)
                exc.filled = n
                raise exc
            k1 = field(y)
            t += h
        out[n] = y
    return out
