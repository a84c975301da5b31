"""Exit criteria for the full method, at the tolerances they are stated with.

Stochastic criteria get up to three master seeds (the per-member statistics
use one, since each seed costs forty searches).  Trained members and search
results are cached in the pytest cache directory, keyed by their config and
a digest of the package source; every step is deterministic, so a rerun
replays the same results.  Run with ``--cache-clear`` to recompute from
scratch.  Each criterion prints one PASS/FAIL line in the summary.
"""
from __future__ import annotations

import functools
import hashlib
import math
import pickle
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import eqd
from eqd.config import config_hash
from eqd.dynamics import ObservationMask, SystemSpec
from eqd.experiment import (add_noise, assemble_ensemble, coefficient_stats, divergence_time,
                            generate_dataset, lorenz5_paper, lv3_paper, observed_data,
                            range_gaps, recover_equations, sliding_rmse,
                            substitute_and_extrapolate, train_member, training_range_study)
from eqd.hybrid import HybridField, loss_and_grad, masked_mse
from eqd.neuralnet import init_params
from eqd.odesolver import SolverConfig, Trajectory, integrate
from eqd.optimize import Schedule, lbfgs_run
from eqd.symreg import (ParetoEntry, SRConfig, Var, canonical_string, eval_expr, exp,
                        fit_constants, pareto_frontier, score_frontier, select_by_score,
                        sr_search)
from eqd.symreg.expr import constants

from oracles import enumerate_minimal, minimal_size

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEEDS = (0, 1, 2)
# the ill-conditioned Lorenz fit keeps improving well past 1000 L-BFGS iterations
LORENZ_SCHEDULE = Schedule(adam_iters=1000, lbfgs_iters=4000)
STRUCT_TOL = 0.05

_SRC_DIGEST = hashlib.sha256(b"".join(
    p.read_bytes() for p in sorted(Path(eqd.__file__).parent.rglob("*.py")))).hexdigest()
_CACHE: Path | None = None


@pytest.fixture(scope="session", autouse=True)
def _member_cache(request):
    global _CACHE
    _CACHE = Path(request.config.cache.mkdir("eqd-members"))


def detail(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))


def lv_config(seed=0, noise=0.0, **kw):
    return lv3_paper(master_seed=seed, noise_percent=noise, **kw)


def lorenz_config(seed=0, noise=0.0, **kw):
    return lorenz5_paper(master_seed=seed, noise_percent=noise, schedule=LORENZ_SCHEDULE, **kw)


# --- cached pipeline pieces ---------------------------------------------------------

def _cached(tag: str, compute):
    """Pickle-backed memo keyed by ``tag`` and the package source."""
    key = hashlib.sha256(f"{tag}:{_SRC_DIGEST}".encode()).hexdigest()
    path = _CACHE / f"{key[:24]}.pkl"
    if path.exists():
        return pickle.loads(path.read_bytes())
    value = compute()
    path.write_bytes(pickle.dumps(value))
    return value


def _train_key(cfg) -> str:
    return config_hash(replace(cfg, sr=SRConfig(), ensemble_size=1, training_ranges=()))


def trained_member(cfg, data, index):
    return _cached(f"member:{_train_key(cfg)}:{index}", lambda: train_member(cfg, data, index))


def by_config(fn):
    """In-process memo keyed by config hash (configs hold dicts, so are unhashable)."""
    memo = {}

    @functools.wraps(fn)
    def wrapper(cfg):
        key = config_hash(cfg)
        if key not in memo:
            memo[key] = fn(cfg)
        return memo[key]
    return wrapper


@by_config
def datasets(cfg):
    clean = generate_dataset(cfg)
    return clean, observed_data(cfg, clean)


@by_config
def ensemble(cfg):
    clean, data = datasets(cfg)
    return assemble_ensemble(cfg, [trained_member(cfg, data, i)
                                   for i in range(cfg.ensemble_size)])


@by_config
def recovered(cfg):
    return _cached(f"recover:{config_hash(cfg)}", lambda: recover_equations(ensemble(cfg), cfg))


def member_stats(cfg):
    return _cached(f"stats:{config_hash(cfg)}", lambda: coefficient_stats(cfg, ensemble(cfg)))


def terms(coeffs, tol=1e-8):
    return {t for t, c in coeffs.items() if abs(c) > tol}


def retry(check, seeds=SEEDS):
    """Run ``check(seed)`` for each seed in turn; return the first pass."""
    notes = []
    for seed in seeds:
        ok, note = check(seed)
        notes.append(f"seed {seed}: {note}")
        if ok:
            return True, seed, "; ".join(notes)
    return False, None, "; ".join(notes)


def lv_check(noise, tol_all):
    def check(seed):
        cfg = lv_config(seed, noise)
        (rec,) = recovered(cfg)
        c = rec.coefficients
        form = canonical_string(rec.selected.expr, cfg.var_names)
        if terms(c) != {"y", "x*y", "y*z"}:
            return False, f"wrong structure {form}"
        want = {"y": -1.0, "x*y": 1.0, "y*z": -1.0} if tol_all else {"y": -1.0}
        ok = all(abs(c[t] - v) <= STRUCT_TOL for t, v in want.items())
        return ok, form
    return check


def lorenz_check(noise, a_tol, rho_tol):
    def check(seed):
        cfg = lorenz_config(seed, noise)
        rx, ry = recovered(cfg)
        fx = canonical_string(rx.selected.expr, cfg.var_names)
        fy = canonical_string(ry.selected.expr, cfg.var_names)
        note = f"dx/dt = {fx}, dy/dt = {fy}"
        cx, cy = rx.coefficients, ry.coefficients
        if terms(cx) != {"x", "y"} or terms(cy) != {"x", "x*z", "y"}:
            return False, "wrong structure " + note
        a = cx["y"]
        ok = (abs(a - 10) <= a_tol and abs(-cx["x"] - 10) <= a_tol
              and abs(cy["x"] - 35) <= rho_tol
              and abs(cy["x*z"] + 1) <= STRUCT_TOL and abs(cy["y"] + 1) <= STRUCT_TOL)
        return ok, note
    return check


# --- 1 ---------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_solver_fidelity(request):
    def err(h):
        traj = integrate(lambda y: -y, [1.0], (0.0, 1.0), 1.0, SolverConfig.fixed(h))
        return abs(traj.states[-1, 0] - math.exp(-1))

    # coarse steps are pre-asymptotic; the finest pair above round-off gives the rate
    order = math.log2(err(2.0 ** -5) / err(2.0 ** -6))
    traj = integrate(lambda y: -y, [1.0], (0.0, 1.0), 0.5, SolverConfig(rel_tol=1e-6, abs_tol=1e-6))
    adaptive = abs(traj.states[-1, 0] - math.exp(-1))
    detail(request, f"order {order:.3f}, adaptive error {adaptive:.1e}")
    assert abs(order - 5.0) <= 0.2
    assert adaptive <= 1e-6


# --- 2 ---------------------------------------------------------------------------------

def _grad_error(cfg, seed, steps=4, n_dirs=6):
    """Worst relative error of directional derivatives against central differences.

    Directions are random Gaussians plus the largest gradient coordinates;
    single near-zero coordinates carry no usable relative precision.
    """
    rng = np.random.default_rng(seed)
    spec = cfg.net_spec
    field = HybridField(cfg.system, cfg.unknown_indices, spec, init_params(spec, seed))
    t1 = steps * cfg.sample_dt
    truth = integrate(cfg.system.rhs, cfg.system.initial_condition, (0, t1), cfg.sample_dt)
    data = Trajectory(truth.times, truth.states + 0.01 * rng.normal(size=truth.states.shape))
    args = (data, cfg.mask, (0.0, t1), SolverConfig.fixed(cfg.sample_dt))
    _, g = loss_and_grad(field, *args)
    p = field.params
    dirs = list(rng.normal(size=(n_dirs, p.size)))
    dirs += [np.eye(1, p.size, i)[0] for i in np.argsort(-np.abs(g))[:n_dirs]]
    worst = 0.0
    for v in dirs:
        v = v / np.linalg.norm(v)
        # five-point stencil: truncation O(h^4) stays far below round-off at this h
        h = 1e-3
        f = [loss_and_grad(field.with_params(p + k * h * v), *args)[0] for k in (-2, -1, 1, 2)]
        fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        an = g @ v
        worst = max(worst, abs(an - fd) / max(abs(fd), abs(an)))
    return worst


@pytest.mark.criterion(2)
def test_gradient_correctness(request):
    worst = max(_grad_error(cfg, s) for cfg in (lv_config(), lorenz_config())
                for s in range(20))
    detail(request, f"max relative error {worst:.1e}")
    assert worst < 1e-4


# --- 3 and 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_lv_recovery_noiseless(request):
    ok, _, note = retry(lv_check(0.0, tol_all=True))
    detail(request, note)
    assert ok


@pytest.mark.criterion(4)
@pytest.mark.parametrize("noise", [2.0, 5.0])
def test_lv_recovery_noisy(request, noise):
    ok, _, note = retry(lv_check(noise, tol_all=False))
    detail(request, f"{noise}%: {note}")
    assert ok


# --- 5 and 6 ---------------------------------------------------------------------------

@functools.cache
def lorenz_noiseless_seed():
    return retry(lorenz_check(0.0, 0.1, 0.2))


@pytest.mark.criterion(5)
def test_lorenz_recovery_noiseless(request):
    ok, _, note = lorenz_noiseless_seed()
    detail(request, note)
    assert ok


@pytest.mark.criterion(6)
def test_lorenz_recovery_noisy(request):
    ok, _, note = retry(lorenz_check(0.3, 0.15, 0.3))
    detail(request, note)
    assert ok


# --- 7 ---------------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_extrapolation_quality(request):
    _, seed, _ = lorenz_noiseless_seed()
    cfg = lorenz_config(seed or 0)
    clean, _ = datasets(cfg)
    hidden = list(cfg.unknown_indices)
    try:
        pred = substitute_and_extrapolate(cfg, [r.selected.expr for r in recovered(cfg)])
    except Exception as exc:  # a partial solve diverges where it stopped
        pred = getattr(exc, "partial", None)
    t_div = divergence_time(pred, clean, hidden, cfg.rmse_window) if pred is not None else cfg.sim_span[0]
    t_div = math.inf if t_div is None else t_div

    ok_lv, lv_seed, _ = retry(lv_check(0.0, tol_all=True))
    lcfg = lv_config(lv_seed or 0)
    lclean, _ = datasets(lcfg)
    (rec,) = recovered(lcfg)
    lpred = substitute_and_extrapolate(lcfg, [rec.selected.expr])
    s = sliding_rmse(lpred, lclean.window(0, lcfg.horizon), lcfg.rmse_window, [1])
    worst = float(s.rmse.max())
    detail(request, f"Lorenz divergence time {t_div:.3f}, LV max sliding RMSE on y {worst:.2e}")
    assert t_div >= 4.5
    assert worst < 0.2


# --- 8 ---------------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_training_range_monotonicity(request):
    lcfg = lv_config()
    lclean, ldata = datasets(lcfg)
    lv = _cached(f"ranges:{config_hash(lcfg)}",
                 lambda: training_range_study(lcfg, data=ldata, clean=lclean))
    means = [r.first_half_mean(lcfg.sim_span[0], lcfg.horizon) for r in lv]

    zcfg = lorenz_config()
    zclean, zdata = datasets(zcfg)
    mid, final = range_gaps(_cached(f"ranges:{config_hash(zcfg)}",
                                    lambda: training_range_study(zcfg, data=zdata, clean=zclean)))
    detail(request, "LV first-half means " + ", ".join(f"{m:.3g}" for m in means)
           + f"; Lorenz mid gap {mid:.3g}, final gap {final:.3g}")
    assert all(a > b for a, b in zip(means, means[1:]))
    assert final < mid


# --- 9 ---------------------------------------------------------------------------------

TRUE_LORENZ = {"dx/dt": {"x": -10.0, "y": 10.0}, "dy/dt": {"x": 35.0, "x*z": -1.0, "y": -1.0}}


@pytest.mark.criterion(9)
def test_per_member_coefficient_statistics(request):
    def check(seed):
        cfg = lorenz_config(seed, ensemble_size=20)
        misses = []
        for st in member_stats(cfg):
            for t, v in TRUE_LORENZ[st.equation].items():
                mean, std = st.mean.get(t, 0.0), st.std.get(t, 0.0)
                if not abs(mean - v) <= std:
                    misses.append(f"{st.equation} {t}: {mean:.4g} +- {std:.2g}")
        return not misses, "ok" if not misses else ", ".join(misses)

    # 40 searches per seed; one seed keeps the suite within hours
    ok, _, note = retry(check, seeds=SEEDS[:1])
    detail(request, note)
    assert ok


# --- 10 --------------------------------------------------------------------------------

x, y, z = Var(0), Var(1), Var(2)
PANEL = [x * y - y * z, y * (x - z), exp(x) - y, x / (y + z), x * y * z, exp(x * y),
         (x + y) * (y - z), x / exp(y), x * x - y * z + x, exp(y) * (x - z) + y]


@pytest.mark.criterion(10)
def test_sr_oracle_suite(request):
    rng = np.random.default_rng(0)
    X = rng.uniform(0.5, 2.0, size=(50, 3))
    fresh = rng.uniform(0.5, 2.0, size=(200, 3))
    table = enumerate_minimal(3, 9, fresh[:12])
    hits, misses = 0, []
    for seed, target in enumerate(PANEL):
        best = select_by_score(sr_search(X, eval_expr(target, X), SRConfig(seed=seed)))
        want = eval_expr(target, fresh)
        got = eval_expr(best.expr, fresh)
        same = bool(np.all(np.abs(got - want) <= 1e-6 * (1 + np.abs(want))))
        minimal = minimal_size(want[:12], table)
        if same and best.complexity <= (minimal or target.complexity):
            hits += 1
        else:
            misses.append(f"{canonical_string(target, 'xyz')} -> "
                          f"{canonical_string(best.expr, 'xyz')} (size {best.complexity})")

    # constants against a least-squares oracle on a linear-in-parameters model
    t = 1.7 * X[:, 0] - 0.4 * X[:, 1] * X[:, 2] + 2.5 + 0.05 * rng.normal(size=len(X))
    model = fit_constants(x * 0.1 + y * z * 0.1 + 0.1, X, t)
    ref = np.linalg.lstsq(np.column_stack([X[:, 0], X[:, 1] * X[:, 2], np.ones(len(X))]),
                          t, rcond=None)[0]
    coef_err = float(np.max(np.abs(np.array(constants(model)) - ref)))

    fr = [ParetoEntry(x, 1, 4.0), ParetoEntry(x * y, 3, 1.0), ParetoEntry(x * y + z, 5, 0.5)]
    best = select_by_score(fr)
    scores = [e.score for e in score_frontier(pareto_frontier([(e.mse, e.expr) for e in fr]))]
    want_scores = [0.0, math.log(4.0) / 2, math.log(2.0) / 2]

    detail(request, f"{hits}/10 planted recovered, constant error {coef_err:.1e}"
           + (f", missed {'; '.join(misses)}" if misses else ""))
    assert hits >= 9
    assert coef_err <= 1e-6
    assert best.complexity == 3
    np.testing.assert_allclose(scores, want_scores, rtol=1e-12)


# --- 11 --------------------------------------------------------------------------------

def _tiny_pipeline():
    cfg = lv3_paper(name="determinism", ensemble_size=2,
                    schedule=Schedule(adam_iters=40, lbfgs_iters=40),
                    sr=SRConfig(n_populations=6, population_size=20, iterations=10))
    clean = generate_dataset(cfg)
    data = observed_data(cfg, clean)
    ens = assemble_ensemble(cfg, [train_member(cfg, data, i) for i in range(2)])
    return [canonical_string(r.selected.expr, cfg.var_names) for r in recover_equations(ens, cfg)]


@pytest.mark.criterion(11)
def test_property_suite(request):
    rng = np.random.default_rng(7)
    lv = SystemSpec("LotkaVolterra3")
    truth = integrate(lv.rhs, lv.initial_condition, (0, 20), 0.05)
    mask = ObservationMask.hiding(3, [1])
    pred = Trajectory(truth.times, truth.states + 0.1)
    base = masked_mse(pred, truth, mask)
    for _ in range(50):
        s = pred.states.copy()
        s[:, 1] = rng.normal(scale=1e3, size=len(s))
        assert masked_mse(Trajectory(truth.times, s), truth, mask) == base

    for pct in (1.0, 2.0, 5.0):
        noisy = add_noise(truth, pct, seed=int(pct * 10))
        ratio = np.std(noisy.states - truth.states, axis=0) / (pct / 100 * truth.states.std(axis=0))
        assert np.all(np.abs(ratio - 1) <= 0.1), ratio

    first, second = _tiny_pipeline(), _tiny_pipeline()
    assert first == second

    for seed in range(20):
        r = np.random.default_rng(seed)
        cands = [(float(m), e) for m, e in zip(r.exponential(size=30),
                                               [x, y, x * y, x + z, exp(x), x * y * z] * 5)]
        fr = pareto_frontier(cands)
        assert all(b.complexity > a.complexity and b.mse < a.mse for a, b in zip(fr, fr[1:]))

    def bowl(p):
        q = np.arange(1, p.size + 1) * p
        return float(np.sum(np.log(np.cosh(q))) + 0.1 * q @ q), \
            (np.tanh(q) + 0.2 * q) * np.arange(1, p.size + 1)

    for start in (rng.normal(size=6) * 3, np.full(9, -2.0)):
        _, rec = lbfgs_run(bowl, start, iters=100)
        losses = [bowl(start)[0]] + [r.loss for r in rec]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
    detail(request, f"determinism: {first[0]}")
