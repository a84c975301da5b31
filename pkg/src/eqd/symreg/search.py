"""Island-model genetic programming over expression trees.

Each island holds ``population_size`` trees and evolves them in steady
state: an event picks parents by tournament on the regularised fitness
``mse + parsimony * complexity``, makes a child by crossover or mutation
and lets it replace the loser of a reverse tournament.  A child whose shape
(the tree with its constant values ignored) is new to the island first gets
a few Gauss-Newton steps on its constants, so shapes that are linear in
their constants are scored at their best constants.  The island's best
member is never replaced.  Every ``migration_interval`` generations the
global best is copied into every island, and at the end of every
iteration the constants of a few members are refined with L-BFGS.

A hall of fame keeps the lowest-mse tree seen at each complexity; the
returned Pareto frontier is read off it after a final constant polish.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..dynamics import InvalidConfigError, InvalidInputError
from ..optimize import OptimizationError, lbfgs_run
from .expr import (BINARY_OPS, Binary, Const, Expr, Unary, Var, _eval_unchecked,
                   compile_vectorized, constants, nodes, replace_at, to_string,
                   with_constants)

__all__ = [
    "SRConfig", "ParetoEntry", "random_tree", "mutate", "crossover", "evolve_population",
    "fit_constants", "sr_search", "pareto_frontier", "score_frontier", "select_by_score",
    "expr_mse", "roundoff_mse",
]

log = logging.getLogger(__name__)

MSE_FLOOR = 1e-300


@dataclass(frozen=True)
class SRConfig:
    """Search budget and variation settings.

    One iteration is ``generations_per_iteration`` generations, and one
    generation is ``population_size`` variation events per island.
    """

    population_size: int = 33
    n_populations: int = 50
    iterations: int = 40
    generations_per_iteration: int = 2
    migration_interval: int = 10
    max_complexity: int = 20
    tournament_size: int = 5
    mutation_prob: float = 0.4
    crossover_prob: float = 0.5
    parsimony: float = 1e-4
    optimize_prob: float = 0.1
    const_iters: int = 20
    newton_steps: int = 2
    early_stop_mse: float | None = None
    replacement: str = "oldest"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("population_size", "n_populations", "iterations",
                     "generations_per_iteration", "migration_interval", "max_complexity",
                     "tournament_size", "const_iters", "jobs"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be a positive integer")
        if int(self.newton_steps) < 0:
            raise InvalidConfigError("newton_steps must be non-negative")
        for name in ("mutation_prob", "crossover_prob", "optimize_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        if self.mutation_prob + self.crossover_prob > 1.0 + 1e-12:
            raise InvalidConfigError("mutation_prob + crossover_prob must not exceed 1")
        if self.parsimony < 0:
            raise InvalidConfigError("parsimony must be non-negative")
        if self.replacement not in ("oldest", "worst"):
            raise InvalidConfigError("replacement must be 'oldest' or 'worst'")
        if self.tournament_size > self.population_size:
            raise InvalidConfigError("tournament_size exceeds population_size")

    @classmethod
    def desk(cls, **overrides) -> "SRConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "SRConfig":
        base = dict(n_populations=1000, population_size=33, iterations=200)
        base.update(overrides)
        return cls(**base)

    @property
    def total_generations(self) -> int:
        return self.iterations * self.generations_per_iteration

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ParetoEntry:
    expr: Expr
    complexity: int
    mse: float
    score: float = 0.0

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        from .canonical import canonical_string
        return {
            "complexity": self.complexity,
            "mse": self.mse,
            "score": self.score,
            "infix": to_string(self.expr, names, digits=17),
            "canonical": canonical_string(self.expr, names),
        }


# --- fitness -----------------------------------------------------------------

def expr_mse(expr: Expr, X: np.ndarray, y: np.ndarray) -> float:
    """MSE of ``expr`` on (X, y); ``inf`` when poisoned or non-finite."""
    pred = _eval_unchecked(expr, X)
    with np.errstate(all="ignore"):
        r = pred - y
        mse = float(r @ r) / r.shape[0]
    return mse if math.isfinite(mse) else math.inf


class _Fitness:
    """Cached mse plus hall-of-fame bookkeeping for one island."""

    def __init__(self, X, y, parsimony, hof=None, fitted=None, shapes=None,
                 newton_steps: int = 0):
        self.X, self.y, self.parsimony = X, y, parsimony
        self.newton_steps = newton_steps
        self.cache: dict = {}
        # tree shape -> the first tree of that shape with Gauss-Newton constants
        self.shapes: dict = {} if shapes is None else shapes
        self.hof: dict[int, tuple[float, Expr]] = {} if hof is None else hof
        # trees whose constants were already refined -> refined tree
        self.fitted: dict = {} if fitted is None else fitted

    def mse(self, e: Expr) -> float:
        k = e.key()
        m = self.cache.get(k)
        if m is None:
            m = expr_mse(e, self.X, self.y)
            self.cache[k] = m
            if math.isfinite(m):
                best = self.hof.get(e.size)
                if best is None or m < best[0]:
                    self.hof[e.size] = (m, e)
        return m

    def score(self, e: Expr) -> float:
        return self.mse(e) + self.parsimony * e.size

    def prepare(self, e: Expr) -> Expr:
        """Child with its constants fitted, once per tree shape."""
        if self.newton_steps == 0 or not constants(e):
            return e
        k = shape_key(e)
        hit = self.shapes.get(k)
        if hit is None:
            hit = newton_constants(e, self.X, self.y, self.newton_steps)
            self.shapes[k] = hit
        return hit


# --- random trees and variation ------------------------------------------------

def random_leaf(rng: np.random.Generator, n_vars: int) -> Expr:
    if rng.random() < 0.6:
        return Var(int(rng.integers(n_vars)))
    return Const(float(rng.standard_normal()))


def random_tree(rng: np.random.Generator, n_vars: int, size: int) -> Expr:
    """Random tree with at most ``size`` nodes (grow method)."""
    if size < 3:
        if size == 2 and rng.random() < 0.2:
            return Unary("exp", random_leaf(rng, n_vars))
        return random_leaf(rng, n_vars)
    if rng.random() < 0.1:
        return Unary("exp", random_tree(rng, n_vars, size - 1))
    left = int(rng.integers(1, size - 1))
    op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
    return Binary(op, random_tree(rng, n_vars, left), random_tree(rng, n_vars, size - 1 - left))


def _mutate_constant(c: float, rng) -> float:
    if rng.random() < 0.5:
        c = c * math.exp(0.5 * rng.standard_normal())
    else:
        c = c + rng.standard_normal()
    if rng.random() < 0.05:
        c = -c
    return c


def _point(expr: Expr, rng, n_vars: int) -> Expr:
    all_nodes = nodes(expr)
    i = int(rng.integers(len(all_nodes)))
    node = all_nodes[i]
    if node.op == "const":
        new = Const(_mutate_constant(node.value, rng))
    elif node.op == "var":
        new = Var(int(rng.integers(n_vars)))
    elif node.op == "exp":
        new = random_leaf(rng, n_vars)
    else:
        ops = [o for o in BINARY_OPS if o != node.op]
        new = Binary(ops[int(rng.integers(len(ops)))], *node.args)
    return replace_at(expr, i, new)


def _insert(expr: Expr, rng, n_vars: int) -> Expr:
    all_nodes = nodes(expr)
    i = int(rng.integers(len(all_nodes)))
    sub = all_nodes[i]
    if rng.random() < 0.1:
        new = Unary("exp", sub)
    else:
        op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
        leaf = random_leaf(rng, n_vars)
        new = Binary(op, sub, leaf) if rng.random() < 0.5 else Binary(op, leaf, sub)
    return replace_at(expr, i, new)


def _delete(expr: Expr, rng, n_vars: int) -> Expr:
    all_nodes = nodes(expr)
    inner = [i for i, n in enumerate(all_nodes) if n.args]
    if not inner:
        return random_leaf(rng, n_vars)
    i = inner[int(rng.integers(len(inner)))]
    args = all_nodes[i].args
    return replace_at(expr, i, args[int(rng.integers(len(args)))])


def _to_leaf(expr: Expr, rng, n_vars: int) -> Expr:
    i = int(rng.integers(expr.size))
    return replace_at(expr, i, random_leaf(rng, n_vars))


def _grow(expr: Expr, rng, n_vars: int) -> Expr:
    all_nodes = nodes(expr)
    leaves = [i for i, n in enumerate(all_nodes) if not n.args]
    i = leaves[int(rng.integers(len(leaves)))]
    return replace_at(expr, i, random_tree(rng, n_vars, 3))


_MUTATIONS = (_point, _point, _insert, _delete, _to_leaf, _grow)
_MUT_WEIGHTS = np.array([0.2, 0.15, 0.2, 0.15, 0.1, 0.2])
_MUT_CDF = np.cumsum(_MUT_WEIGHTS / _MUT_WEIGHTS.sum())


def mutate(expr: Expr, rng: np.random.Generator, n_vars: int, max_complexity: int,
           tries: int = 10) -> Expr:
    """A mutated copy within ``max_complexity``; the input itself if no try fits."""
    for _ in range(tries):
        op = _MUTATIONS[int(np.searchsorted(_MUT_CDF, rng.random(), side="right"))]
        child = op(expr, rng, n_vars)
        if child.size <= max_complexity:
            return child
    return expr


def crossover(a: Expr, b: Expr, rng: np.random.Generator,
              max_complexity: int) -> tuple[Expr, Expr]:
    """Swap one random subtree of ``a`` with one of ``b``; oversize children revert."""
    na, nb = nodes(a), nodes(b)
    i, j = int(rng.integers(len(na))), int(rng.integers(len(nb)))
    ca = replace_at(a, i, nb[j])
    cb = replace_at(b, j, na[i])
    return (ca if ca.size <= max_complexity else a,
            cb if cb.size <= max_complexity else b)


def _tournament(scores: list[float], k: int, rng) -> int:
    idx = rng.choice(len(scores), size=k, replace=False)
    return int(min(idx, key=lambda i: (scores[i], i)))


def _loser(scores: list[float], k: int, rng, protect: int) -> int:
    idx = [int(i) for i in rng.choice(len(scores), size=k, replace=False) if i != protect]
    if not idx:
        idx = [i for i in range(len(scores)) if i != protect][:1]
    return max(idx, key=lambda i: (scores[i], -i))


def _best_index(scores: list[float]) -> int:
    return min(range(len(scores)), key=lambda i: (scores[i], i))


def evolve_population(pop: list[Expr], inputs, targets, config: SRConfig,
                      rng: np.random.Generator, fitness: _Fitness | None = None) -> list[Expr]:
    """One generation: ``population_size`` steady-state variation events.

    Infeasible children (poisoned or non-finite) are discarded.  With both
    variation probabilities at zero every event is a no-op.
    """
    if len(pop) != config.population_size:
        raise InvalidInputError(
            f"population has {len(pop)} members, expected {config.population_size}")
    X = np.asarray(inputs, dtype=float)
    fit = fitness if fitness is not None else _Fitness(
        X, np.asarray(targets, float), config.parsimony, newton_steps=config.newton_steps)
    n_vars = X.shape[1]
    pop = list(pop)
    scores = [fit.score(e) for e in pop]
    k = config.tournament_size
    p_cross, p_mut = config.crossover_prob, config.mutation_prob
    for _ in range(config.population_size):
        r = rng.random()
        if r < p_cross:
            a = pop[_tournament(scores, k, rng)]
            b = pop[_tournament(scores, k, rng)]
            children = crossover(a, b, rng, config.max_complexity)
        elif r < p_cross + p_mut:
            parent = pop[_tournament(scores, k, rng)]
            children = (mutate(parent, rng, n_vars, config.max_complexity),)
        else:
            continue
        for child in children:
            child = fit.prepare(child)
            s = fit.score(child)
            if not math.isfinite(s):
                continue
            best = _best_index(scores)
            if config.replacement == "oldest":
                # the list is kept oldest-first; the elite is skipped
                slot = 1 if best == 0 else 0
                del pop[slot], scores[slot]
                pop.append(child)
                scores.append(s)
            else:
                slot = _loser(scores, k, rng, best)
                pop[slot], scores[slot] = child, s
    return pop


# --- constants -----------------------------------------------------------------

def fit_constants(expr: Expr, inputs, targets, iters: int = 100) -> Expr:
    """Refine the constants of ``expr`` by L-BFGS on the mse.

    Gradients are central finite differences over the constants.  The
    result never has a larger mse than the input; a tree without constants,
    or a failed optimisation, comes back unchanged.
    """
    c0 = np.array(constants(expr), dtype=float)
    if c0.size == 0:
        return expr
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    f0 = expr_mse(expr, X, y)
    if not math.isfinite(f0):
        return expr

    fn = compile_vectorized(expr)
    n = y.shape[0]

    def f(c):
        with np.errstate(all="ignore"):
            r = fn(X, c) - y
            val = float(r @ r) / n
        return val if math.isfinite(val) else math.inf

    def objective(c):
        val = f(c)
        if not math.isfinite(val):
            return math.inf, np.zeros_like(c)
        g = np.empty_like(c)
        for i in range(c.size):
            h = 1e-6 * max(1.0, abs(c[i]))
            cp, cm = c.copy(), c.copy()
            cp[i] += h
            cm[i] -= h
            fp, fm = f(cp), f(cm)
            with np.errstate(all="ignore"):
                g[i] = (fp - fm) / (2.0 * h)
            if not math.isfinite(g[i]):
                return math.inf, np.zeros_like(c)
        return val, g

    try:
        c, _ = lbfgs_run(objective, c0, iters=iters, memory=10, gtol=1e-14)
    except (OptimizationError, FloatingPointError):
        return expr
    if not np.all(np.isfinite(c)):
        return expr
    out = with_constants(expr, c)
    return out if expr_mse(out, X, y) <= f0 else expr


def shape_key(expr: Expr):
    """Structural key with constant values left out."""
    if expr.op == "const":
        return ("c",)
    if not expr.args:
        return expr.key()
    return (expr.op, *(shape_key(a) for a in expr.args))


def newton_constants(expr: Expr, inputs, targets, steps: int = 2) -> Expr:
    """Gauss-Newton steps on the constants with a forward-difference Jacobian.

    One step lands on the optimum, up to difference round-off, when ``expr``
    is linear in its constants.  A step is kept only if it lowers the mse,
    so the result is never worse.
    """
    c = np.array(constants(expr), dtype=float)
    if c.size == 0 or steps < 1:
        return expr
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    fn = compile_vectorized(expr)

    def resid(cv):
        with np.errstate(all="ignore"):
            return fn(X, cv) - y

    def sq(v):
        with np.errstate(all="ignore"):
            return float(v @ v)

    r = resid(c)
    f = sq(r)
    if not math.isfinite(f):
        return expr
    for _ in range(steps):
        J = np.empty((y.size, c.size))
        for i in range(c.size):
            h = 1e-7 * max(1.0, abs(c[i]))
            cp = c.copy()
            cp[i] += h
            J[:, i] = (resid(cp) - r) / h
        if not np.all(np.isfinite(J)):
            break
        try:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        c_new = c + step
        r_new = resid(c_new)
        f_new = sq(r_new)
        if not f_new < f:
            break
        c, r, f = c_new, r_new, f_new
    return with_constants(expr, c)


# --- frontier ---------------------------------------------------------------------

def roundoff_mse(targets) -> float:
    """MSE level that evaluation round-off alone can produce on ``targets``.

    Differences below this are rounding luck, not a better fit.
    """
    y = np.asarray(targets, dtype=float)
    return (1e3 * np.finfo(float).eps) ** 2 * float(np.mean(y * y))


def pareto_frontier(candidates, tol: float = 0.0) -> list[ParetoEntry]:
    """Strictly improving (complexity, mse) staircase from ``(mse, expr)`` pairs.

    A more complex entry is kept only if it lowers the mse by more than
    ``tol``.
    """
    best: dict[int, tuple[float, Expr]] = {}
    for m, e in candidates:
        if not math.isfinite(m):
            continue
        cur = best.get(e.size)
        if cur is None or m < cur[0] or (m == cur[0] and e.key() < cur[1].key()):
            best[e.size] = (m, e)
    out: list[ParetoEntry] = []
    for c in sorted(best):
        m, e = best[c]
        if not out or m < out[-1].mse - tol:
            out.append(ParetoEntry(e, c, m))
    return score_frontier(out)


def score_frontier(frontier: list[ParetoEntry]) -> list[ParetoEntry]:
    """Attach ``score_i = -d ln(mse) / d complexity`` along the frontier."""
    for i, entry in enumerate(frontier):
        if i == 0:
            entry.score = 0.0
            continue
        prev = frontier[i - 1]
        dc = entry.complexity - prev.complexity
        entry.score = (math.log(max(prev.mse, MSE_FLOOR))
                       - math.log(max(entry.mse, MSE_FLOOR))) / dc
    return frontier


def select_by_score(frontier: list[ParetoEntry]) -> ParetoEntry:
    """Highest-score entry; ties go to the simpler expression."""
    if not frontier:
        raise InvalidInputError("frontier is empty")
    frontier = score_frontier(sorted(frontier, key=lambda e: e.complexity))
    best = frontier[0]
    for entry in frontier[1:]:
        if entry.score > best.score:
            best = entry
    return best


# --- islands ------------------------------------------------------------------------

@dataclass
class _Island:
    pop: list
    rng_state: dict
    hof: dict = field(default_factory=dict)
    fitted: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)


def _optimize_island(pop, fit: _Fitness, rng, config: SRConfig):
    scores = [fit.score(e) for e in pop]
    chosen = {_best_index(scores)}
    chosen.update(i for i in range(len(pop)) if rng.random() < config.optimize_prob)
    for i in sorted(chosen):
        if not constants(pop[i]):
            continue
        key = pop[i].key()
        new = fit.fitted.get(key)
        if new is None:
            new = fit_constants(pop[i], fit.X, fit.y, iters=config.const_iters)
            fit.fitted[key] = new
            fit.fitted[new.key()] = new
        if fit.score(new) < scores[i]:
            pop[i] = new


def _run_epoch(args):
    island, X, y, config, gen_start, gen_stop = args
    rng = np.random.default_rng()
    rng.bit_generator.state = island.rng_state
    fit = _Fitness(X, y, config.parsimony, dict(island.hof), dict(island.fitted),
                   dict(island.shapes), config.newton_steps)
    pop = island.pop
    for g in range(gen_start, gen_stop):
        pop = evolve_population(pop, X, y, config, rng, fit)
        if (g + 1) % config.generations_per_iteration == 0:
            _optimize_island(pop, fit, rng, config)
    return _Island(pop, rng.bit_generator.state, fit.hof, fit.fitted, fit.shapes)


def _init_island(index: int, n_vars: int, X, y, config: SRConfig) -> _Island:
    rng = np.random.default_rng([config.seed, index])
    pop = []
    while len(pop) < config.population_size:
        e = random_tree(rng, n_vars, int(rng.integers(1, min(8, config.max_complexity) + 1)))
        if math.isfinite(expr_mse(e, X, y)):
            pop.append(e)
    return _Island(pop, rng.bit_generator.state)


def sr_search(inputs, targets, config: SRConfig = SRConfig(),
              jobs: int | None = None) -> list[ParetoEntry]:
    """Evolve ``n_populations`` islands and return the scored Pareto frontier.

    Deterministic for a given ``config.seed`` whatever the worker count.
    """
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InvalidInputError("inputs must be a non-empty 2-D array")
    if X.shape[0] != y.shape[0]:
        raise InvalidInputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidInputError("inputs and targets must be finite")
    n_vars = X.shape[1]
    jobs = config.jobs if jobs is None else jobs
    islands = [_init_island(i, n_vars, X, y, config) for i in range(config.n_populations)]
    total = config.total_generations
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        gen = 0
        while gen < total:
            stop = min(gen + config.migration_interval, total)
            work = [(isl, X, y, config, gen, stop) for isl in islands]
            islands = list(pool.map(_run_epoch, work) if pool else map(_run_epoch, work))
            gen = stop
            best_mse, best = _migrate(islands, X, y, config)
            if config.early_stop_mse is not None and best_mse <= config.early_stop_mse:
                log.debug("early stop at generation %d (mse %.3g)", gen, best_mse)
                break
    finally:
        if pool is not None:
            pool.shutdown()

    hof: dict[int, tuple[float, Expr]] = {}
    for isl in islands:
        for c, (m, e) in isl.hof.items():
            if c not in hof or m < hof[c][0]:
                hof[c] = (m, e)
    const = Const(float(np.mean(y)))
    candidates = [(expr_mse(const, X, y), const)]
    for m, e in hof.values():
        # an exact fit often carries a vestigial additive constant; offer the
        # tree without it so the frontier can keep the smaller version
        for variant in (e, *_without_offsets(e)):
            polished = fit_constants(variant, X, y, iters=200)
            candidates.append((expr_mse(polished, X, y), polished))
    return pareto_frontier(candidates, tol=roundoff_mse(y))


def _without_offsets(e: Expr):
    """Copies of ``e`` with one additive constant term removed."""
    if e.op not in ("+", "-"):
        return
    a, b = e.args
    if b.op == "const":
        yield a
    if a.op == "const" and e.op == "+":
        yield b
    for va in _without_offsets(a):
        yield Binary(e.op, va, b)
    if e.op == "+":
        for vb in _without_offsets(b):
            yield Binary("+", a, vb)


def _migrate(islands: list[_Island], X, y, config: SRConfig):
    """Copy the global best (regularised fitness) over each island's worst member."""
    fit = _Fitness(X, y, config.parsimony)
    best, best_score = None, math.inf
    for isl in islands:
        for e in isl.pop:
            s = fit.score(e)
            if s < best_score:
                best, best_score = e, s
    if best is None:
        return math.inf, None
    for isl in islands:
        if any(e == best for e in isl.pop):
            continue
        scores = [fit.score(e) for e in isl.pop]
        worst = max(range(len(scores)), key=lambda i: (scores[i], -i))
        isl.pop = list(isl.pop)
        isl.pop[worst] = best
    return fit.mse(best), best
