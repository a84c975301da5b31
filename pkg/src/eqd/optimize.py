"""Full-batch Adam and L-BFGS with a strong-Wolfe line search.

An objective maps a parameter vector to ``(loss, grad)``.  ``inf`` loss is
a legal return value meaning "this point diverged".
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OptRecord", "Telemetry", "OptimizationError", "adam_run", "lbfgs_run",
    "strong_wolfe", "train", "Schedule",
]

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptRecord:
    iteration: int
    loss: float
    grad_norm: float
    stage: str = ""
    note: str = ""


@dataclass
class Telemetry:
    records: list[OptRecord] = field(default_factory=list)
    lbfgs_stop: str = ""
    final_loss: float = math.inf

    def rows(self):
        for r in self.records:
            yield (r.iteration, r.stage, r.loss, r.grad_norm)


@dataclass(frozen=True)
class Schedule:
    adam_lr: float = 0.01
    adam_iters: int = 1000
    lbfgs_iters: int = 1000
    lbfgs_memory: int = 10


def adam_run(objective: Objective, params0, lr: float = 0.01, iters: int = 1000,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with bias correction; one record per iteration.

    A record holds the loss at the parameters *before* that iteration's
    update.  When the loss is ``inf`` the parameters fall back to the last
    finite point, the update is skipped and the next step is halved until a
    finite loss is seen again.
    """
    if not lr > 0:
        raise OptimizationError("learning rate must be positive")
    p = np.array(params0, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    records: list[OptRecord] = []
    last_good = None
    backoff = 1.0
    t = 0
    for it in range(1, iters + 1):
        loss, g = objective(p)
        if not math.isfinite(loss):
            if last_good is None:
                raise OptimizationError("objective is not finite at the initial parameters")
            records.append(OptRecord(it, math.inf, math.nan, "adam", "skipped"))
            p_prev, step = last_good
            backoff *= 0.5
            p = p_prev - backoff * step
            continue
        g = np.asarray(g, dtype=float)
        records.append(OptRecord(it, float(loss), float(np.linalg.norm(g)), "adam"))
        t += 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + eps)
        last_good = (p, step)
        p = p - step
        backoff = 1.0
    return p, records


def _cubic_min(t1, f1, d1, t2, f2, d2, lo, hi):
    """Minimiser of the cubic through two points with slopes, clipped to [lo, hi]."""
    if not all(math.isfinite(v) for v in (f1, d1, f2, d2)):
        return 0.5 * (lo + hi)
    d_1 = d1 + d2 - 3.0 * (f1 - f2) / (t1 - t2)
    sq = d_1 * d_1 - d1 * d2
    if sq < 0:
        return 0.5 * (lo + hi)
    d_2 = math.copysign(math.sqrt(sq), t2 - t1)
    denom = d2 - d1 + 2.0 * d_2
    if denom == 0:
        return 0.5 * (lo + hi)
    t = t2 - (t2 - t1) * (d2 + d_2 - d1) / denom
    if not math.isfinite(t):
        return 0.5 * (lo + hi)
    return min(max(t, lo), hi)


def strong_wolfe(objective: Objective, x, f0: float, g0, d, t_init: float = 1.0,
                 c1: float = 1e-4, c2: float = 0.9, max_evals: int = 25):
    """Line search for a step satisfying the strong Wolfe conditions.

    Returns ``(t, f, g, n_evals, ok)``.  When the curvature condition cannot
    be met but a sufficient-decrease point was found, that point is returned
    with ``ok=True``; ``ok=False`` means no acceptable decrease at all.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        gtd0 = float(g0 @ d)
    evals = 0
    if not (math.isfinite(gtd0) and gtd0 < 0):
        return 0.0, f0, g0, evals, False

    def phi(t):
        nonlocal evals
        evals += 1
        with np.errstate(over="ignore", invalid="ignore"):
            f, g = objective(x + t * d)
            f = float(f)
            gtd = float(g @ d) if math.isfinite(f) else math.nan
        if not (math.isfinite(f) and math.isfinite(gtd)):
            return math.inf, None, math.nan
        return f, g, gtd

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f0, g0, gtd0
    t = t_init
    lo = hi = None
    while evals < max_evals:
        f, g, gtd = phi(t)
        if f > f0 + c1 * t * gtd0 or (t_prev > 0 and f >= f_prev):
            lo, hi = (t_prev, f_prev, g_prev, gtd_prev), (t, f, g, gtd)
            break
        if abs(gtd) <= -c2 * gtd0:
            return t, f, g, evals, True
        if gtd >= 0:
            lo, hi = (t, f, g, gtd), (t_prev, f_prev, g_prev, gtd_prev)
            break
        t_next = _cubic_min(t_prev, f_prev, gtd_prev, t, f, gtd,
                            t + 0.01 * (t - t_prev), 10.0 * t)
        t_prev, f_prev, g_prev, gtd_prev = t, f, g, gtd
        t = t_next
    else:
        # ran out while extrapolating; the last point already satisfies Armijo
        if t_prev > 0:
            return t_prev, f_prev, g_prev, evals, True
        return 0.0, f0, g0, evals, False

    # zoom: lo always satisfies sufficient decrease and has the lower value
    while evals < max_evals:
        (tl, fl, gl, dl), (th, fh, gh, dh) = lo, hi
        width = abs(th - tl)
        if width < 1e-12 * max(1.0, abs(tl)):
            break
        a, b = min(tl, th), max(tl, th)
        t = _cubic_min(tl, fl, dl, th, fh, dh, a + 0.1 * width, b - 0.1 * width)
        f, g, gtd = phi(t)
        if f > f0 + c1 * t * gtd0 or f >= fl:
            hi = (t, f, g, gtd)
        else:
            if abs(gtd) <= -c2 * gtd0:
                return t, f, g, evals, True
            if gtd * (th - tl) >= 0:
                hi = lo
            lo = (t, f, g, gtd)
    tl, fl, gl, _ = lo
    if tl > 0 and fl < f0:
        return tl, fl, gl, evals, True
    return 0.0, f0, g0, evals, False


def lbfgs_run(objective: Objective, params0, iters: int = 1000, memory: int = 10,
              c1: float = 1e-4, c2: float = 0.9, gtol: float = 1e-10,
              info: dict | None = None):
    """Limited-memory BFGS; one record per accepted iteration.

    Stops early when the gradient norm drops below ``gtol`` or the line
    search finds no decrease.  The stop reason is written to ``info["stop"]``
    when a dict is passed, and to the ``note`` of the last record.
    """
    if memory < 1:
        raise OptimizationError("memory must be at least 1")
    x = np.array(params0, dtype=float)
    f, g = objective(x)
    f = float(f)
    if not math.isfinite(f):
        raise OptimizationError("objective is not finite at the initial parameters")
    g = np.asarray(g, dtype=float)
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    rho: list[float] = []
    records: list[OptRecord] = []
    reason = "max_iters"
    for k in range(1, iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            reason = "gtol"
            break
        with np.errstate(over="ignore", invalid="ignore"):
            d = -_two_loop(g, S, Y, rho)
            descent = float(g @ d) < 0
        if not descent:
            S.clear(); Y.clear(); rho.clear()
            d = -g
        t_init = min(1.0, 1.0 / float(np.abs(g).sum())) if not S else 1.0
        t, f_new, g_new, _, ok = strong_wolfe(objective, x, f, g, d, t_init, c1, c2)
        if not ok:
            if S:
                # retry once along steepest descent with fresh memory
                S.clear(); Y.clear(); rho.clear()
                d = -g
                t, f_new, g_new, _, ok = strong_wolfe(
                    objective, x, f, g, d, min(1.0, 1.0 / float(np.abs(g).sum())), c1, c2)
            if not ok:
                reason = "line_search"
                break
        s = t * d
        g_new = np.asarray(g_new, dtype=float)
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * float(yv @ yv):
            S.append(s); Y.append(yv); rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0); Y.pop(0); rho.pop(0)
        x = x + s
        f, g = f_new, g_new
        records.append(OptRecord(k, f, float(np.linalg.norm(g)), "lbfgs"))
    if records:
        records[-1].note = reason
    if info is not None:
        info["stop"] = reason
    log.debug("L-BFGS stopped after %d accepted steps (%s)", len(records), reason)
    return x, records


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * float(s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * float(y @ q)
        q += (a - b) * s
    return q


class _BestTracker:
    """Wraps an objective and remembers the lowest finite loss evaluated."""

    def __init__(self, objective: Objective):
        self.objective = objective
        self.best_loss = math.inf
        self.best_params = None
        self.n_evals = 0

    def __call__(self, p):
        loss, g = self.objective(p)
        self.n_evals += 1
        if math.isfinite(loss) and loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_params = np.array(p, dtype=float)
        return loss, g


def train(objective: Objective, params0, schedule: Schedule = Schedule()):
    """Adam warm-up followed by L-BFGS refinement.

    Returns ``(params, telemetry)``.  The returned parameters have the lowest
    loss evaluated anywhere during the run, so the result is never worse
    than the starting point or the end of the Adam stage.
    """
    tracker = _BestTracker(objective)
    params, records = adam_run(tracker, params0, schedule.adam_lr, schedule.adam_iters)
    telemetry = Telemetry(records=list(records))
    if schedule.lbfgs_iters > 0:
        end_loss, _ = tracker(params)
        start = params if math.isfinite(end_loss) and end_loss <= tracker.best_loss else tracker.best_params
        if start is None:
            raise OptimizationError("no finite loss was seen during the Adam stage")
        info: dict = {}
        params, lrec = lbfgs_run(tracker, start, schedule.lbfgs_iters,
                                 schedule.lbfgs_memory, info=info)
        telemetry.records.extend(lrec)
        telemetry.lbfgs_stop = info["stop"]
    elif schedule.adam_iters > 0:
        tracker(params)
    if tracker.best_params is not None:
        params = tracker.best_params
    telemetry.final_loss = tracker.best_loss
    return params, telemetry
