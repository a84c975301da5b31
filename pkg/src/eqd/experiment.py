"""End-to-end equation-discovery experiments.

The pipeline is: simulate the true system, add measurement noise, train an
ensemble of hybrid models on a short window, average the members' network
inputs and outputs along their own simulated trajectories, and distil the
averaged outputs into closed-form expressions.  The recovered expressions
are then substituted back into the system and extrapolated.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dynamics import InvalidConfigError, InvalidInputError, ObservationMask, SystemSpec
from .hybrid import HybridField, loss_and_grad, network_outputs
from .neuralnet import MLPSpec, init_params
from .odesolver import SolverConfig, SolverError, Trajectory, integrate
from .optimize import OptimizationError, Schedule, Telemetry, train
from .symreg import (Expr, ParetoEntry, SRConfig, extract_linear_coeffs, select_by_score,
                     sr_search, to_callable)

__all__ = [
    "ExperimentConfig", "MemberResult", "EnsembleResult", "RecoveredEquation",
    "SlidingRMSE", "RangeResult", "CoefficientStats", "lv3_paper", "lorenz5_paper",
    "PRESETS", "derive_seed", "generate_dataset", "add_noise", "train_member",
    "train_ensemble", "member_spread", "recover_equations", "substitute_and_extrapolate",
    "extrapolate_hybrid", "sliding_rmse", "divergence_time", "training_range_study",
    "range_gaps",
    "coefficient_stats", "exact_mean", "observed_data", "member_rollout",
    "assemble_ensemble", "EXCLUSION_WARN_FRACTION",
]

log = logging.getLogger(__name__)

# fraction of excluded (diverged) members above which a warning is raised
EXCLUSION_WARN_FRACTION = 0.2

# seed-stream tags
_NOISE, _MEMBER, _SR, _MEMBER_SR = 0, 1, 2, 3


def derive_seed(master_seed: int, *tags: int) -> int:
    """Independent 32-bit seed for a tagged sub-stream of ``master_seed``.

    The tag count is part of the entropy because SeedSequence ignores
    trailing zeros, which would make ``(m, 1)`` and ``(m, 1, 0)`` collide.
    """
    ss = np.random.SeedSequence([int(master_seed), len(tags), *(int(t) for t in tags)])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun one experiment.

    ``mask`` defaults to hiding exactly the unknown equations' states.
    ``horizon`` is the end time of extrapolations and defaults to the end of
    ``sim_span``.
    """

    name: str
    system: SystemSpec
    sim_span: tuple[float, float]
    sample_dt: float
    train_window: tuple[float, float]
    unknown_indices: tuple[int, ...]
    net_spec: MLPSpec
    mask: ObservationMask | None = None
    noise_percent: float = 0.0
    ensemble_size: int = 10
    schedule: Schedule = Schedule()
    sr: SRConfig = SRConfig()
    master_seed: int = 0
    horizon: float | None = None
    training_ranges: tuple[float, ...] = ()
    rmse_window: int = 20
    train_unobserved_ic: bool = False

    def __post_init__(self):
        unknown = tuple(sorted(set(int(i) for i in self.unknown_indices)))
        dim = self.system.dim
        if not unknown:
            raise InvalidConfigError("unknown_indices must name at least one equation")
        if any(i < 0 or i >= dim for i in unknown) or len(unknown) == dim:
            raise InvalidConfigError(f"unknown_indices {unknown} invalid for dim {dim}")
        mask = self.mask or ObservationMask.hiding(dim, unknown)
        if mask.dim != dim:
            raise InvalidConfigError(f"mask length {mask.dim} != system dim {dim}")
        t0, t1 = (float(v) for v in self.sim_span)
        w0, w1 = (float(v) for v in self.train_window)
        if not t1 >= t0:
            raise InvalidConfigError("sim_span must satisfy t1 >= t0")
        if not (t0 <= w0 < w1 <= t1 + 1e-12):
            raise InvalidConfigError("train_window must lie inside sim_span")
        if not self.sample_dt > 0:
            raise InvalidConfigError("sample_dt must be positive")
        if self.noise_percent < 0 or not math.isfinite(self.noise_percent):
            raise InvalidConfigError("noise_percent must be a finite non-negative number")
        if self.ensemble_size < 1:
            raise InvalidConfigError("ensemble_size must be positive")
        if self.net_spec.input_dim != dim or self.net_spec.output_dim != len(unknown):
            raise InvalidConfigError(
                "net_spec must take the full state and emit one output per unknown equation")
        if self.rmse_window < 1:
            raise InvalidConfigError("rmse_window must be positive")
        horizon = t1 if self.horizon is None else float(self.horizon)
        if horizon <= t0:
            raise InvalidConfigError("horizon must exceed the start of sim_span")
        for r in self.training_ranges:
            if not (0 < r and t0 + r <= t1 + 1e-12):
                raise InvalidConfigError(f"training range {r} does not fit in sim_span")
        object.__setattr__(self, "unknown_indices", unknown)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "sim_span", (t0, t1))
        object.__setattr__(self, "train_window", (w0, w1))
        object.__setattr__(self, "horizon", horizon)
        object.__setattr__(self, "training_ranges", tuple(float(r) for r in self.training_ranges))

    @property
    def var_names(self) -> tuple[str, ...]:
        return self.system.sysdef.var_names

    @property
    def train_solver(self) -> SolverConfig:
        return SolverConfig.fixed(self.sample_dt)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def lv3_paper(**overrides) -> ExperimentConfig:
    """Lotka-Volterra setup: y hidden, window 0-2, dt 0.05, ten members."""
    base = dict(
        name="lv3-paper",
        system=SystemSpec("LotkaVolterra3"),
        sim_span=(0.0, 20.0),
        sample_dt=0.05,
        train_window=(0.0, 2.0),
        unknown_indices=(1,),
        net_spec=MLPSpec(3, (40, 40), 1),
        ensemble_size=10,
        training_ranges=(2.0, 3.25, 4.5),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def lorenz5_paper(**overrides) -> ExperimentConfig:
    """Five-mode Lorenz setup: x and y hidden, window 0-0.25, dt 0.01."""
    base = dict(
        name="lorenz5-paper",
        system=SystemSpec("Lorenz5"),
        sim_span=(0.0, 6.0),
        sample_dt=0.01,
        train_window=(0.0, 0.25),
        unknown_indices=(0, 1),
        net_spec=MLPSpec(5, (40, 40), 2),
        ensemble_size=10,
        training_ranges=(0.4, 0.8, 1.2),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS: dict[str, Callable[..., ExperimentConfig]] = {
    "lv3-paper": lv3_paper,
    "lorenz5-paper": lorenz5_paper,
}


# --- data ------------------------------------------------------------------------

def generate_dataset(config: ExperimentConfig, solver: SolverConfig | None = None) -> Trajectory:
    """Adaptive ground-truth solve from the system's initial condition."""
    spec = config.system
    return integrate(spec.rhs, spec.initial_condition, config.sim_span, config.sample_dt,
                     solver or SolverConfig())


def add_noise(traj: Trajectory, percent: float, seed: int) -> Trajectory:
    """Gaussian noise with per-channel std ``percent/100 * std(channel)``.

    The channel std is taken over the whole trajectory.  ``percent=0``
    returns an identical copy.
    """
    if percent < 0 or not math.isfinite(percent):
        raise InvalidInputError("percent must be a finite non-negative number")
    states = traj.states.copy()
    if percent > 0:
        scale = (percent / 100.0) * np.std(traj.states, axis=0)
        rng = np.random.default_rng(seed)
        states = states + rng.standard_normal(states.shape) * scale
    return Trajectory(traj.times.copy(), states)


def observed_data(config: ExperimentConfig, clean: Trajectory | None = None) -> Trajectory:
    """The (possibly noisy) dataset that training sees."""
    clean = generate_dataset(config) if clean is None else clean
    return add_noise(clean, config.noise_percent, derive_seed(config.master_seed, _NOISE))


def exact_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean with compensated summation (``math.fsum``)."""
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays])
    flat = stack.reshape(len(arrays), -1)
    n = len(arrays)
    out = np.array([math.fsum(flat[:, j]) / n for j in range(flat.shape[1])])
    return out.reshape(stack.shape[1:])


# --- training ----------------------------------------------------------------------

@dataclass
class MemberResult:
    index: int
    seed: int
    params: np.ndarray
    telemetry: Telemetry
    y0: np.ndarray
    error: str = ""

    @property
    def final_loss(self) -> float:
        return self.telemetry.final_loss

    @property
    def included(self) -> bool:
        return math.isfinite(self.final_loss) and not self.error


def _hybrid(config: ExperimentConfig, params) -> HybridField:
    return HybridField(config.system, config.unknown_indices, config.net_spec, params)


def train_member(config: ExperimentConfig, data: Trajectory, index: int,
                 train_window: tuple[float, float] | None = None) -> MemberResult:
    """Train one hybrid from the member's own initialisation seed.

    The solve starts from the system's true initial condition.  With
    ``train_unobserved_ic`` the unobserved entries of that state are
    optimised alongside the network.
    """
    window = config.train_window if train_window is None else train_window
    seed = derive_seed(config.master_seed, _MEMBER, index)
    p0 = init_params(config.net_spec, seed)
    field = _hybrid(config, p0)
    y0 = np.array(config.system.initial_condition, dtype=float)
    hidden = np.flatnonzero(~config.mask.as_array())
    solver = config.train_solver
    n_net = config.net_spec.n_params

    if config.train_unobserved_ic and hidden.size:
        def objective(z):
            y = y0.copy()
            y[hidden] = z[n_net:]
            loss, g, gy = loss_and_grad(field.with_params(z[:n_net]), data, config.mask,
                                        window, solver, y0=y, return_y0_grad=True)
            return loss, np.concatenate([g, gy[hidden]])
        start = np.concatenate([p0, y0[hidden]])
    else:
        def objective(p):
            return loss_and_grad(field.with_params(p), data, config.mask, window, solver, y0=y0)
        start = p0

    try:
        z, telemetry = train(objective, start, config.schedule)
    except OptimizationError as exc:
        log.warning("member %d failed: %s", index, exc)
        return MemberResult(index, seed, p0, Telemetry(), y0, error=str(exc))
    y_start = y0.copy()
    if config.train_unobserved_ic and hidden.size:
        y_start[hidden] = z[n_net:]
        z = z[:n_net]
    return MemberResult(index, seed, np.asarray(z), telemetry, y_start)


@dataclass
class EnsembleResult:
    """Trained members plus the averaged network inputs and outputs.

    ``per_member_inputs[k]`` is member k's own simulated trajectory over the
    training window and ``per_member_targets[k]`` its network outputs along
    it; both lists cover included members only.
    """

    members: list[MemberResult]
    times: np.ndarray
    per_member_inputs: list[np.ndarray]
    per_member_targets: list[np.ndarray]
    avg_inputs: np.ndarray
    avg_targets: np.ndarray
    excluded: list[int] = field(default_factory=list)

    @property
    def included(self) -> list[MemberResult]:
        return [m for m in self.members if m.included]

    @property
    def excluded_fraction(self) -> float:
        return len(self.excluded) / max(len(self.members), 1)


def _member_task(args):
    config, data, index, window = args
    return train_member(config, data, index, window)


def member_rollout(config: ExperimentConfig, member: MemberResult,
                   window: tuple[float, float] | None = None):
    """Member's simulated states over the window and its network outputs there."""
    t0, t1 = config.train_window if window is None else window
    field = _hybrid(config, member.params)
    traj = integrate(field.evaluator(), member.y0, (t0, t1), config.sample_dt,
                     config.train_solver)
    return traj, network_outputs(field, traj.states)


def train_ensemble(config: ExperimentConfig, data: Trajectory, jobs: int = 1,
                   progress: Callable[[MemberResult], None] | None = None) -> EnsembleResult:
    """Train ``ensemble_size`` members and average them along their own rollouts."""
    window = config.train_window
    if data.times[0] > window[0] + 1e-9 or data.times[-1] < window[1] - 1e-9:
        raise InvalidInputError("data does not cover the training window")
    tasks = [(config, data, i, window) for i in range(config.ensemble_size)]
    members: list[MemberResult] = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            for m in pool.map(_member_task, tasks):
                members.append(m)
                if progress:
                    progress(m)
    else:
        for t in tasks:
            m = _member_task(t)
            members.append(m)
            if progress:
                progress(m)
    return assemble_ensemble(config, members)


def assemble_ensemble(config: ExperimentConfig, members: list[MemberResult]) -> EnsembleResult:
    """Roll out included members and average inputs/targets exactly."""
    inputs, targets, excluded = [], [], []
    times = None
    for m in members:
        if not m.included:
            excluded.append(m.index)
            continue
        try:
            traj, out = member_rollout(config, m)
        except SolverError as exc:
            log.warning("member %d rollout failed: %s", m.index, exc)
            m.error = str(exc)
            excluded.append(m.index)
            continue
        times = traj.times
        inputs.append(traj.states)
        targets.append(out)
    frac = len(excluded) / len(members)
    if frac > EXCLUSION_WARN_FRACTION:
        warnings.warn(f"{len(excluded)} of {len(members)} ensemble members diverged "
                      f"and were excluded", RuntimeWarning, stacklevel=2)
    if not inputs:
        raise OptimizationError("every ensemble member diverged")
    return EnsembleResult(members, times, inputs, targets, exact_mean(inputs),
                          exact_mean(targets), excluded)


def member_spread(result: EnsembleResult) -> dict:
    """Pairwise RMS deviation between members' network outputs.

    Returns max and median pairwise RMS along with the RMS of the averaged
    target, so callers can compare the spread to the signal size.
    """
    outs = result.per_member_targets
    pair = [float(np.sqrt(np.mean((outs[i] - outs[j]) ** 2)))
            for i in range(len(outs)) for j in range(i + 1, len(outs))]
    return {
        "max": max(pair) if pair else 0.0,
        "median": float(np.median(pair)) if pair else 0.0,
        "target_rms": float(np.sqrt(np.mean(result.avg_targets ** 2))),
    }


# --- symbolic recovery ---------------------------------------------------------------

@dataclass
class RecoveredEquation:
    index: int
    name: str
    selected: ParetoEntry
    frontier: list[ParetoEntry]
    coefficients: dict[str, float]
    representable: bool

    def to_dict(self, names: Sequence[str]) -> dict:
        return {
            "index": self.index,
            "equation": f"d{self.name}/dt",
            **self.selected.to_dict(names),
            "coefficients": self.coefficients,
            "representable": self.representable,
        }


def _recover(inputs, targets, config: ExperimentConfig, sr: SRConfig, seed_tags,
             jobs: int = 1) -> list[RecoveredEquation]:
    names = config.var_names
    out = []
    for k, idx in enumerate(config.unknown_indices):
        cfg = replace(sr, seed=derive_seed(config.master_seed, *seed_tags, k))
        frontier = sr_search(inputs, targets[:, k], cfg, jobs=jobs)
        best = select_by_score(frontier)
        lc = extract_linear_coeffs(best.expr, names)
        coeffs = dict(lc.coeffs)
        coeffs.update((t, c) for t, c in lc.residual.items() if isinstance(c, float))
        out.append(RecoveredEquation(idx, names[idx], best, frontier, coeffs,
                                     lc.representable))
    return out


def recover_equations(result: EnsembleResult, config: ExperimentConfig,
                      sr: SRConfig | None = None, jobs: int = 1) -> list[RecoveredEquation]:
    """One search per unknown equation on the ensemble-averaged data."""
    if not result.per_member_inputs:
        raise InvalidInputError("ensemble has no included members")
    return _recover(result.avg_inputs, result.avg_targets, config, sr or config.sr,
                    (_SR,), jobs)


# --- extrapolation and errors ----------------------------------------------------------

def _symbolic_field(config: ExperimentConfig, learned: Sequence[Expr]):
    if len(learned) != len(config.unknown_indices):
        raise InvalidInputError("need one expression per unknown equation")
    sysdef = config.system.sysdef
    p = config.system.param_tuple
    fns = [to_callable(e) for e in learned]
    idx = list(config.unknown_indices)

    def f(y):
        d = sysdef.rhs(y, p)
        for i, fn in zip(idx, fns):
            d[i] = fn(y)
        return d

    return f


def substitute_and_extrapolate(config: ExperimentConfig, learned: Sequence[Expr],
                               horizon: float | None = None,
                               solver: SolverConfig | None = None) -> Trajectory:
    """Adaptive solve of the known equations with ``learned`` in place of the unknown ones."""
    horizon = config.horizon if horizon is None else horizon
    # a wrong learned term can make the system stiff; fail fast instead of crawling
    solver = solver or SolverConfig(max_steps=500_000)
    return integrate(_symbolic_field(config, learned), config.system.initial_condition,
                     (config.sim_span[0], horizon), config.sample_dt, solver)


def extrapolate_hybrid(config: ExperimentConfig, member: MemberResult,
                       horizon: float | None = None,
                       solver: SolverConfig | None = None) -> tuple[Trajectory, bool]:
    """Adaptive solve of a trained hybrid; returns ``(trajectory, completed)``.

    A solve that blows up returns the samples reached before failing.
    """
    horizon = config.horizon if horizon is None else horizon
    field = _hybrid(config, member.params)
    solver = solver or SolverConfig(max_steps=500_000)
    try:
        traj = integrate(field.evaluator(), member.y0, (config.sim_span[0], horizon),
                         config.sample_dt, solver)
        return traj, True
    except SolverError as exc:
        log.info("hybrid extrapolation stopped at t=%.4g: %s", exc.t, exc)
        return exc.partial, False


@dataclass
class SlidingRMSE:
    """Per-window RMSE; ``rmse`` has one column per entry of ``channels``."""

    t_center: np.ndarray
    rmse: np.ndarray
    channels: tuple[int, ...]
    window: int

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.rmse, axis=0)

    def rows(self):
        cum = self.cumulative
        for i, t in enumerate(self.t_center):
            yield (t, *self.rmse[i], *cum[i])

    def header(self, names: Sequence[str]) -> list[str]:
        cols = [names[c] for c in self.channels]
        return ["t_center", *(f"rmse_{c}" for c in cols), *(f"cumulative_{c}" for c in cols)]


def sliding_rmse(pred: Trajectory, truth: Trajectory, window: int = 20,
                 channels: Sequence[int] | None = None) -> SlidingRMSE:
    """RMSE over every run of ``window`` consecutive samples (stride 1)."""
    if pred.states.shape != truth.states.shape:
        raise InvalidInputError(
            f"shape mismatch: {pred.states.shape} vs {truth.states.shape}")
    if not np.allclose(pred.times, truth.times, rtol=0, atol=1e-9):
        raise InvalidInputError("trajectories are sampled at different times")
    n = len(truth)
    if not 1 <= window <= n:
        raise InvalidInputError(f"window {window} must lie in [1, {n}]")
    channels = tuple(range(truth.dim)) if channels is None else tuple(int(c) for c in channels)
    r = pred.states[:, channels] - truth.states[:, channels]
    sq = np.lib.stride_tricks.sliding_window_view(r * r, window, axis=0)
    rmse = np.sqrt(sq.mean(axis=-1))
    tc = np.lib.stride_tricks.sliding_window_view(truth.times, window).mean(axis=-1)
    return SlidingRMSE(tc, rmse, channels, window)


def divergence_time(pred: Trajectory, truth: Trajectory, channels: Sequence[int],
                    window: int = 20, fraction: float = 0.1) -> float | None:
    """Centre time of the first window whose RMSE on any channel exceeds
    ``fraction`` of that channel's range over ``truth``.

    ``None`` means the prediction never diverged.  A prediction shorter than
    ``truth`` (a blown-up solve) diverges at its last sample if not before.
    """
    n = len(pred)
    full = truth
    truth = Trajectory(truth.times[:n], truth.states[:n])
    scale = np.ptp(full.states[:, list(channels)], axis=0)
    if n >= window:
        s = sliding_rmse(pred, truth, window, channels)
        bad = np.any(s.rmse > fraction * scale, axis=1)
        if np.any(bad):
            return float(s.t_center[int(np.argmax(bad))])
    if n < len(full):
        return float(pred.times[-1])
    return None


# --- training-range study -----------------------------------------------------------------

@dataclass
class RangeResult:
    train_range: float
    member: MemberResult
    completed: bool
    rmse: SlidingRMSE | None

    def first_half_mean(self, t_start: float, horizon: float) -> float:
        """Mean RMSE (over windows and channels) with centres in the first half."""
        if self.rmse is None:
            return math.inf
        keep = self.rmse.t_center <= t_start + 0.5 * (horizon - t_start)
        vals = self.rmse.rmse[keep]
        return float(np.mean(vals)) if vals.size else math.inf


def training_range_study(config: ExperimentConfig, ranges: Sequence[float] | None = None,
                         horizon: float | None = None, data: Trajectory | None = None,
                         clean: Trajectory | None = None, jobs: int = 1) -> list[RangeResult]:
    """Train one hybrid per training range and score its extrapolation.

    RMSE is measured on the unobserved channels against the clean ground
    truth.  Every range uses member index 0, so the network initialisation
    is shared and only the data length differs.
    """
    ranges = config.training_ranges if ranges is None else tuple(ranges)
    horizon = config.horizon if horizon is None else horizon
    clean = generate_dataset(config) if clean is None else clean
    data = observed_data(config, clean) if data is None else data
    t0 = config.sim_span[0]
    tasks = [(config, data, 0, (t0, t0 + r)) for r in ranges]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            members = list(pool.map(_member_task, tasks))
    else:
        members = [_member_task(t) for t in tasks]
    hidden = tuple(int(i) for i in np.flatnonzero(~config.mask.as_array()))
    truth = clean.window(t0, horizon)
    out = []
    for r, m in zip(ranges, members):
        if not m.included:
            out.append(RangeResult(r, m, False, None))
            continue
        pred, done = extrapolate_hybrid(config, m, horizon)
        n = len(pred)
        if n >= config.rmse_window:
            s = sliding_rmse(pred, Trajectory(truth.times[:n], truth.states[:n]),
                             config.rmse_window, hidden)
        else:
            s = None
        out.append(RangeResult(r, m, done, s))
    return out


def range_gaps(results: Sequence[RangeResult]) -> tuple[float, float]:
    """Spread of extrapolation error across training ranges, mid-trajectory and at the end.

    At each window the gap is the max minus the min, over ranges, of the
    channel-averaged RMSE.  Returns ``(mid, final)``: the mean gap over
    windows centred in the middle third of the common span, and the gap at
    the last common window.  Ranges whose solve stopped early are compared
    only over the span they reached.
    """
    if len(results) < 2 or any(r.rmse is None for r in results):
        return math.inf, math.inf
    n = min(len(r.rmse.t_center) for r in results)
    curves = np.array([r.rmse.rmse[:n].mean(axis=1) for r in results])
    gap = curves.max(axis=0) - curves.min(axis=0)
    tc = results[0].rmse.t_center[:n]
    lo, hi = tc[0] + (tc[-1] - tc[0]) / 3, tc[0] + 2 * (tc[-1] - tc[0]) / 3
    mid = gap[(tc >= lo) & (tc <= hi)]
    return float(mid.mean()) if mid.size else math.inf, float(gap[-1])


# --- per-member coefficient statistics ---------------------------------------------------------

@dataclass
class CoefficientStats:
    """Mean and std (ddof=1) of each basis coefficient across members."""

    equation: str
    terms: list[str]
    mean: dict[str, float]
    std: dict[str, float]
    per_member: list[dict[str, float]]
    expressions: list[str]
    unrepresentable: list[int]

    def present_terms(self, tol: float = 1e-8) -> list[str]:
        return [t for t in self.terms
                if any(abs(c.get(t, 0.0)) > tol for c in self.per_member)]

    def to_dict(self) -> dict:
        keep = self.present_terms()
        return {
            "equation": self.equation,
            "terms": {t: {"mean": self.mean[t], "std": self.std[t]} for t in keep},
            "members": len(self.per_member),
            "expressions": self.expressions,
            "unrepresentable_members": self.unrepresentable,
        }


def coefficient_stats(config: ExperimentConfig, result: EnsembleResult,
                      sr: SRConfig | None = None, jobs: int = 1) -> list[CoefficientStats]:
    """Search each included member separately and aggregate basis coefficients.

    A term absent from a member's expression counts as a zero coefficient.
    """
    members = result.included
    if len(result.per_member_inputs) < 2:
        raise InvalidInputError("coefficient statistics need at least two members")
    sr = sr or config.sr
    names = config.var_names
    per_eq: list[list] = [[] for _ in config.unknown_indices]
    for m, X, Y in zip(members, result.per_member_inputs, result.per_member_targets):
        for k, rec in enumerate(_recover(X, Y, config, sr, (_MEMBER_SR, m.index), jobs)):
            per_eq[k].append(rec)
    out = []
    for k, idx in enumerate(config.unknown_indices):
        recs = per_eq[k]
        terms: list[str] = []
        for rec in recs:
            terms.extend(t for t in rec.coefficients if t not in terms)
        table = [{t: float(rec.coefficients.get(t, 0.0)) for t in terms} for rec in recs]
        mean = {t: math.fsum(row[t] for row in table) / len(table) for t in terms}
        std = {t: float(np.std([row[t] for row in table], ddof=1)) for t in terms}
        out.append(CoefficientStats(
            equation=f"d{names[idx]}/dt", terms=terms, mean=mean, std=std, per_member=table,
            expressions=[rec.to_dict(names)["canonical"] for rec in recs],
            unrepresentable=[members[i].index for i, rec in enumerate(recs)
                             if not rec.representable]))
    return out
