"""``eqd`` command line: simulate -> train -> discover -> report.

Every stage reads and writes one run directory, so each can be rerun or
resumed on its own.  Exit codes:

    0  success
    1  unexpected internal error
    2  invalid config or usage (field-level diagnostics on stderr)
    3  ODE solver failure
    4  more than 20% of ensemble members diverged
    5  symbolic regression failed on some equation
    6  run directory is missing required artifacts
"""
from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import __version__
from .config import (ConfigError, config_hash, dump_config, load_config, preset_path,
                     with_cli_overrides)
from .dynamics import InvalidInputError
from .experiment import (EXCLUSION_WARN_FRACTION, PRESETS, ExperimentConfig, MemberResult,
                         add_noise, assemble_ensemble, coefficient_stats, derive_seed,
                         divergence_time, generate_dataset, recover_equations, sliding_rmse,
                         substitute_and_extrapolate, train_member, training_range_study)
from .io import atomic_write_json, atomic_write_text, csv_text
from .neuralnet import load_checkpoint, save_checkpoint
from .odesolver import SolverError, Trajectory
from .optimize import OptimizationError, Telemetry
from .symreg import SRConfig, canonical_string, parse_expr

log = logging.getLogger("eqd")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED, EXIT_SR, EXIT_INCOMPLETE = range(7)

# files each stage must leave behind, relative to the run directory
STAGE_FILES = {
    "simulate": ["config.yaml", "dataset_clean.csv", "dataset.csv"],
    "train": ["ensemble/avg_inputs.csv", "ensemble/avg_targets.csv", "ensemble/members.json"],
    "discover": ["discover/equations.json", "discover/extrapolation.csv",
                 "discover/sliding_rmse.csv"],
}


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- run directory helpers ------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_key(cfg: ExperimentConfig) -> str:
    """Hash of everything except the SR settings.

    Simulation and training do not depend on SR, so ``discover`` may be
    rerun on the same trained ensemble with a different search budget.
    """
    return config_hash(dataclasses.replace(cfg, sr=SRConfig()))


def run_dir_for(cfg: ExperimentConfig, out: str | None) -> Path:
    if out:
        return Path(out)
    root = Path(os.environ.get("EQD_OUT", "runs"))
    return root / f"{cfg.name}-{run_key(cfg)[:12]}"


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_manifest(run: Path) -> dict:
    p = run / "manifest.json"
    if p.exists():
        with open(p) as fh:
            return json.load(fh)
    return {}


def _write_manifest(run: Path, cfg: ExperimentConfig, stage: str, started: float,
                    finished: float) -> None:
    man = _read_manifest(run)
    man.setdefault("created", _now())
    man.update({
        "tool": "eqd",
        "version": __version__,
        "config_hash": config_hash(cfg),
        "run_key": run_key(cfg),
        "master_seed": cfg.master_seed,
        "updated": _now(),
    })
    stages = man.setdefault("stages", {})
    stages[stage] = {
        "finished_at": _now(),
        "duration_s": round(finished - started, 3),
    }
    files = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            files[str(p.relative_to(run))] = {"bytes": p.stat().st_size,
                                              "sha256": _file_digest(p)}
    man["files"] = files
    atomic_write_json(run / "manifest.json", man)


def _missing(run: Path, stages) -> list[str]:
    return [f for s in stages for f in STAGE_FILES[s] if not (run / f).exists()]


def _prepare_run(cfg: ExperimentConfig, out: str | None) -> Path:
    run = run_dir_for(cfg, out)
    snap = run / "config.yaml"
    if snap.exists():
        existing = load_config(snap)
        if run_key(existing) != run_key(cfg):
            raise StageError(EXIT_CONFIG,
                             f"{run} holds a run of a different config; choose another --out")
    else:
        run.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, snap)
    return run


def _names(cfg: ExperimentConfig) -> list[str]:
    return list(cfg.var_names)


def _load_traj(path: Path) -> Trajectory:
    return Trajectory.from_csv(path)


# --- stages ---------------------------------------------------------------------

def stage_simulate(cfg: ExperimentConfig, run: Path) -> None:
    started = time.time()
    try:
        clean = generate_dataset(cfg)
    except SolverError as exc:
        raise StageError(EXIT_SOLVER, f"ground-truth solve failed: {exc}") from None
    noisy = add_noise(clean, cfg.noise_percent, derive_seed(cfg.master_seed, 0))
    names = _names(cfg)
    atomic_write_text(run / "dataset_clean.csv", clean.to_csv(names=names))
    atomic_write_text(run / "dataset.csv", noisy.to_csv(names=names))
    _write_manifest(run, cfg, "simulate", started, time.time())
    click.echo(f"wrote {len(clean)} samples to {run / 'dataset.csv'}")


def _member_paths(run: Path, i: int) -> tuple[Path, Path]:
    return run / "members" / f"member_{i:03d}.json", run / "members" / f"member_{i:03d}_telemetry.csv"


def _save_member(run: Path, cfg: ExperimentConfig, m: MemberResult) -> None:
    ckpt, tele = _member_paths(run, m.index)
    atomic_write_text(tele, csv_text(["iteration", "stage", "loss", "grad_norm"],
                                     m.telemetry.rows()))
    final = m.final_loss
    save_checkpoint(ckpt, cfg.net_spec, m.params, member=m.index, seed=m.seed,
                    final_loss=final if math.isfinite(final) else None,
                    lbfgs_stop=m.telemetry.lbfgs_stop, y0=[float(v) for v in m.y0],
                    error=m.error)


def _load_member(run: Path, i: int) -> MemberResult | None:
    ckpt, _ = _member_paths(run, i)
    if not ckpt.exists():
        return None
    spec, params, extra = load_checkpoint(ckpt)
    loss = extra.get("final_loss")
    tel = Telemetry(final_loss=math.inf if loss is None else float(loss),
                    lbfgs_stop=extra.get("lbfgs_stop", ""))
    return MemberResult(i, int(extra["seed"]), params, tel, np.array(extra["y0"], float),
                        extra.get("error", ""))


def _load_members(run: Path, cfg: ExperimentConfig) -> list[MemberResult]:
    members = [_load_member(run, i) for i in range(cfg.ensemble_size)]
    if any(m is None for m in members):
        raise StageError(EXIT_INCOMPLETE, "member checkpoints are missing; run `eqd train`")
    return members


def stage_train(cfg: ExperimentConfig, run: Path, jobs: int, resume: bool) -> None:
    if resume and not _missing(run, ["simulate", "train"]):
        click.echo("training already complete; nothing to do")
        return
    if _missing(run, ["simulate"]):
        stage_simulate(cfg, run)
    started = time.time()
    data = _load_traj(run / "dataset.csv")
    members: list[MemberResult | None] = [
        _load_member(run, i) if resume else None for i in range(cfg.ensemble_size)]
    todo = [i for i, m in enumerate(members) if m is None]
    if todo:
        from concurrent.futures import ProcessPoolExecutor
        from .experiment import _member_task
        tasks = [(cfg, data, i, cfg.train_window) for i in todo]
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
                done = pool.map(_member_task, tasks)
                for m in done:
                    members[m.index] = m
                    _save_member(run, cfg, m)
                    click.echo(f"member {m.index}: final loss {m.final_loss:.3e}")
        else:
            for t in tasks:
                m = _member_task(t)
                members[m.index] = m
                _save_member(run, cfg, m)
                click.echo(f"member {m.index}: final loss {m.final_loss:.3e}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ens = assemble_ensemble(cfg, members)
    except OptimizationError as exc:
        raise StageError(EXIT_DIVERGED, str(exc)) from None
    names = _names(cfg)
    hidden_names = [f"d{names[i]}/dt" for i in cfg.unknown_indices]
    atomic_write_text(run / "ensemble/avg_inputs.csv",
                      csv_text(["t", *names], np.column_stack([ens.times, ens.avg_inputs])))
    atomic_write_text(run / "ensemble/avg_targets.csv",
                      csv_text(["t", *hidden_names],
                               np.column_stack([ens.times, ens.avg_targets])))
    for m, X, Y in zip(ens.included, ens.per_member_inputs, ens.per_member_targets):
        atomic_write_text(run / f"ensemble/member_{m.index:03d}_io.csv",
                          csv_text(["t", *names, *hidden_names],
                                   np.column_stack([ens.times, X, Y])))
    summary = {
        "ensemble_size": cfg.ensemble_size,
        "included": [m.index for m in ens.included],
        "excluded": ens.excluded,
        "final_losses": {str(m.index): (m.final_loss if math.isfinite(m.final_loss) else None)
                         for m in members},
    }
    atomic_write_json(run / "ensemble/members.json", summary)
    _write_manifest(run, cfg, "train", started, time.time())
    if ens.excluded_fraction > EXCLUSION_WARN_FRACTION:
        raise StageError(EXIT_DIVERGED,
                         f"{len(ens.excluded)} of {cfg.ensemble_size} members diverged: "
                         f"{ens.excluded}")
    click.echo(f"trained {len(ens.included)} members; averages in {run / 'ensemble'}")


def _ensemble_from_disk(run: Path, cfg: ExperimentConfig):
    members = _load_members(run, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return assemble_ensemble(cfg, members)


def stage_discover(cfg: ExperimentConfig, run: Path, mode: str, jobs: int,
                   range_study: bool) -> None:
    missing = _missing(run, ["simulate", "train"])
    if missing:
        raise StageError(EXIT_INCOMPLETE, "missing artifacts: " + ", ".join(missing))
    started = time.time()
    try:
        ens = _ensemble_from_disk(run, cfg)
    except OptimizationError as exc:
        raise StageError(EXIT_DIVERGED, str(exc)) from None
    names = _names(cfg)
    try:
        recovered = recover_equations(ens, cfg, jobs=jobs)
    except (InvalidInputError, OptimizationError, ValueError) as exc:
        raise StageError(EXIT_SR, f"symbolic regression failed: {exc}") from None
    out = run / "discover"
    for rec in recovered:
        atomic_write_json(out / f"frontier_{rec.name}.json",
                          [e.to_dict(names) for e in rec.frontier])
    clean = _load_traj(run / "dataset_clean.csv")
    hidden = [int(i) for i in np.flatnonzero(~cfg.mask.as_array())]
    truth = clean.window(cfg.sim_span[0], cfg.horizon)
    try:
        ex = substitute_and_extrapolate(cfg, [r.selected.expr for r in recovered])
        completed = True
    except SolverError as exc:
        ex, completed = exc.partial, False
    n = len(ex)
    truth_n = Trajectory(truth.times[:n], truth.states[:n])
    atomic_write_text(out / "extrapolation.csv",
                      csv_text(["t", *names, *(f"true_{v}" for v in names)],
                               np.column_stack([ex.times, ex.states, truth_n.states])))
    div = divergence_time(ex, truth, hidden, cfg.rmse_window)
    if n >= cfg.rmse_window:
        s = sliding_rmse(ex, truth_n, cfg.rmse_window, hidden)
        atomic_write_text(out / "sliding_rmse.csv", csv_text(s.header(names), s.rows()))
        rmse_summary = {names[c]: {"max": float(s.rmse[:, j].max()),
                                   "mean": float(s.rmse[:, j].mean())}
                        for j, c in enumerate(hidden)}
    else:
        atomic_write_text(out / "sliding_rmse.csv", "t_center\n")
        rmse_summary = {}
    atomic_write_json(out / "equations.json", {
        "mode": "averaged",
        "sr": {k: v for k, v in cfg.sr.to_dict().items() if k != "jobs"},
        "equations": [r.to_dict(names) for r in recovered],
        "extrapolation": {"completed": completed, "horizon": cfg.horizon,
                          "divergence_time": div, "sliding_rmse": rmse_summary},
    })
    if mode == "per-member":
        try:
            stats = coefficient_stats(cfg, ens, jobs=jobs)
        except (InvalidInputError, ValueError) as exc:
            raise StageError(EXIT_SR, f"per-member symbolic regression failed: {exc}") from None
        atomic_write_json(out / "coefficient_stats.json", [s.to_dict() for s in stats])
    if range_study and cfg.training_ranges:
        data = _load_traj(run / "dataset.csv")
        results = training_range_study(cfg, data=data, clean=clean, jobs=jobs)
        rows = []
        for r in results:
            if r.rmse is None:
                continue
            for t, vals in zip(r.rmse.t_center, r.rmse.rmse):
                rows.append((r.train_range, t, *vals))
        atomic_write_text(out / "range_study.csv",
                          csv_text(["train_range", "t_center",
                                    *(f"rmse_{names[c]}" for c in hidden)], rows))
        atomic_write_json(out / "range_study.json", [
            {"train_range": r.train_range, "final_loss": r.member.final_loss
             if math.isfinite(r.member.final_loss) else None,
             "completed": r.completed,
             "first_half_mean_rmse": r.first_half_mean(cfg.sim_span[0], cfg.horizon)}
            for r in results])
    _write_manifest(run, cfg, "discover", started, time.time())
    for r in recovered:
        click.echo(f"d{r.name}/dt = {r.to_dict(names)['canonical']}")


# --- report -----------------------------------------------------------------------

def build_report(run: Path) -> dict:
    missing = _missing(run, ["simulate", "train", "discover"])
    if missing:
        raise StageError(EXIT_INCOMPLETE, "incomplete run; missing: " + ", ".join(missing))
    cfg = load_config(run / "config.yaml")
    names = _names(cfg)
    sysdef = cfg.system.sysdef
    with open(run / "discover/equations.json") as fh:
        eqs = json.load(fh)
    with open(run / "ensemble/members.json") as fh:
        members = json.load(fh)
    losses = [v for v in members["final_losses"].values() if v is not None]
    equations = []
    for e in eqs["equations"]:
        idx = e["index"]
        true = parse_expr(sysdef.equations[idx], names, cfg.system.params)
        equations.append({
            "equation": e["equation"],
            "true": canonical_string(true, names),
            "learned": e["canonical"],
            "complexity": e["complexity"],
            "mse": e["mse"],
            "coefficients": {k: v for k, v in e["coefficients"].items() if abs(v) > 1e-8},
        })
    report = {
        "run": str(run),
        "config_name": cfg.name,
        "config_hash": config_hash(cfg),
        "system": cfg.system.name,
        "noise_percent": cfg.noise_percent,
        "master_seed": cfg.master_seed,
        "equations": equations,
        "training": {
            "ensemble_size": members["ensemble_size"],
            "included": len(members["included"]),
            "excluded": members["excluded"],
            "final_loss_min": min(losses) if losses else None,
            "final_loss_median": float(np.median(losses)) if losses else None,
            "final_loss_max": max(losses) if losses else None,
        },
        "extrapolation": eqs["extrapolation"],
    }
    stats_path = run / "discover/coefficient_stats.json"
    if stats_path.exists():
        with open(stats_path) as fh:
            report["coefficient_stats"] = json.load(fh)
    jsonschema.validate(report, _report_schema())
    return report


def _report_schema() -> dict:
    return json.loads(resources.files("eqd").joinpath("schemas/report.schema.json").read_text())


def format_report(rep: dict) -> str:
    lines = [f"run {rep['run']}  ({rep['system']}, noise {rep['noise_percent']}%, "
             f"seed {rep['master_seed']})", ""]
    w = max(len(e["true"]) for e in rep["equations"])
    lines.append(f"{'equation':<10} {'true':<{w}}   learned")
    for e in rep["equations"]:
        lines.append(f"{e['equation']:<10} {e['true']:<{w}}   {e['learned']}")
    tr = rep["training"]
    lines += ["", f"members: {tr['included']}/{tr['ensemble_size']} included"]
    if tr["final_loss_median"] is not None:
        lines.append(f"final loss: min {tr['final_loss_min']:.3e}  "
                     f"median {tr['final_loss_median']:.3e}  max {tr['final_loss_max']:.3e}")
    ex = rep["extrapolation"]
    div = ex["divergence_time"]
    lines.append(f"extrapolation to t={ex['horizon']}: "
                 f"{'completed' if ex['completed'] else 'stopped early'}; divergence time "
                 f"{'none' if div is None else f'{div:.3f}'}")
    for ch, s in ex["sliding_rmse"].items():
        lines.append(f"  sliding RMSE {ch}: max {s['max']:.4g}  mean {s['mean']:.4g}")
    for st in rep.get("coefficient_stats", []):
        lines.append(f"per-member coefficients for {st['equation']} ({st['members']} members):")
        for term, v in st["terms"].items():
            lines.append(f"  {term:<8} mean {v['mean']:.8g}  std {v['std']:.3g}")
    return "\n".join(lines)


# --- click wiring -------------------------------------------------------------------

def _resolve(config: str, seed, noise, sr_budget, jobs) -> ExperimentConfig:
    return with_cli_overrides(load_config(config), seed=seed, noise=noise,
                              sr_budget=sr_budget, jobs=jobs)


def _run(fn):
    """Translate stage errors into exit codes."""
    try:
        fn()
    except ConfigError as exc:
        click.echo("config error:", err=True)
        for field, msg in exc.problems:
            click.echo(f"  {field}: {msg}", err=True)
        sys.exit(EXIT_CONFIG)
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except SolverError as exc:
        click.echo(f"solver error: {exc}", err=True)
        sys.exit(EXIT_SOLVER)


def _common(f):
    f = click.option("--config", "config", required=True,
                     help="Config file, or a preset name (lv3-paper, lorenz5-paper).")(f)
    f = click.option("--seed", type=int, default=None, help="Override the master seed.")(f)
    f = click.option("--noise", type=float, default=None, help="Override noise percent.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None,
                     help="Run directory (default $EQD_OUT/<name>-<hash>).")(f)
    f = click.option("--jobs", type=int, default=None,
                     help="Worker processes (default: all CPUs).")(f)
    f = click.option("--sr-budget", type=click.Choice(["desk", "paper"]), default=None,
                     help="Symbolic-regression budget.")(f)
    return f


def _jobs(jobs) -> int:
    return max(1, jobs if jobs is not None else (os.cpu_count() or 1))


@click.group()
@click.version_option(__version__, prog_name="eqd")
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Discover unknown ODE equations with hybrid neural ODEs and symbolic regression."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
def simulate(config, seed, noise, out, jobs, sr_budget):
    """Generate the ground-truth and noisy datasets."""
    def go():
        cfg = _resolve(config, seed, noise, sr_budget, jobs)
        run = _prepare_run(cfg, out)
        stage_simulate(cfg, run)
        click.echo(str(run))
    _run(go)


@main.command()
@_common
@click.option("--resume", is_flag=True, help="Keep finished members; no-op if complete.")
def train(config, seed, noise, out, jobs, sr_budget, resume):
    """Train the hybrid ensemble and write averaged SR inputs/targets."""
    def go():
        cfg = _resolve(config, seed, noise, sr_budget, jobs)
        run = _prepare_run(cfg, out)
        stage_train(cfg, run, _jobs(jobs), resume)
        click.echo(str(run))
    _run(go)


@main.command()
@_common
@click.option("--mode", type=click.Choice(["averaged", "per-member"]), default="averaged",
              help="per-member also runs SR on every member for coefficient statistics.")
@click.option("--range-study", is_flag=True, help="Also run the training-range study.")
def discover(config, seed, noise, out, jobs, sr_budget, mode, range_study):
    """Recover equations, extrapolate them and score the extrapolation."""
    def go():
        cfg = _resolve(config, seed, noise, sr_budget, jobs)
        run = run_dir_for(cfg, out)
        if not (run / "config.yaml").exists():
            raise StageError(EXIT_INCOMPLETE, f"{run} has no trained run; run `eqd train`")
        _prepare_run(cfg, out)
        stage_discover(cfg, run, mode, _jobs(jobs), range_study)
        click.echo(str(run))
    _run(go)


@main.command()
@_common
@click.option("--mode", type=click.Choice(["averaged", "per-member"]), default="averaged",
              help="per-member also runs SR on every member for coefficient statistics.")
@click.option("--range-study", is_flag=True, help="Also run the training-range study.")
def run(config, seed, noise, out, jobs, sr_budget, mode, range_study):
    """simulate, train and discover in one go (finished stages are kept)."""
    def go():
        cfg = _resolve(config, seed, noise, sr_budget, jobs)
        rdir = _prepare_run(cfg, out)
        if _missing(rdir, ["simulate"]):
            stage_simulate(cfg, rdir)
        stage_train(cfg, rdir, _jobs(jobs), resume=True)
        stage_discover(cfg, rdir, mode, _jobs(jobs), range_study)
        click.echo(format_report(build_report(rdir)))
    _run(go)


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
def report(run_dir, fmt):
    """Summarise a finished run: true vs learned equations, losses, errors."""
    def go():
        rep = build_report(Path(run_dir))
        if fmt == "json":
            click.echo(json.dumps(rep, indent=2))
        else:
            click.echo(format_report(rep))
    _run(go)


@main.command()
@click.argument("name", required=False)
def presets(name):
    """List bundled presets, or print one."""
    if name is None:
        for n in sorted(PRESETS):
            click.echo(n)
        return
    def go():
        click.echo(preset_path(name).read_text(), nl=False)
    _run(go)


if __name__ == "__main__":  # pragma: no cover
    main()
