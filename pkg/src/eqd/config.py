"""Experiment configuration files: parsing, validation, serialisation, hashing.

A config is a YAML (or JSON) document validated against
``schemas/config.schema.json``.  Numbers may be written as fractions
(``"8/3"``) so parameters like beta keep full precision.  Serialisation
writes every float with ``repr`` so parse -> dump -> parse is exact.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .dynamics import InvalidConfigError, ObservationMask, SystemSpec
from .experiment import PRESETS, ExperimentConfig
from .neuralnet import MLPSpec
from .optimize import Schedule
from .symreg import SRConfig

__all__ = [
    "ConfigError", "load_config", "parse_config", "config_to_dict", "dump_config",
    "config_hash", "preset_path", "load_preset", "validate_document", "SR_BUDGETS",
]

SR_BUDGETS = {"desk": SRConfig.desk, "paper": SRConfig.paper}
_SR_FIELDS = tuple(k for k in SRConfig.__dataclass_fields__ if k not in ("seed", "jobs"))


class ConfigError(InvalidConfigError):
    """A config document failed validation; ``problems`` lists (field, message)."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{f}: {m}" for f, m in problems))


def _schema() -> dict:
    text = resources.files("eqd").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def _field_path(err: jsonschema.ValidationError) -> str:
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path.append(missing)
    if err.validator == "additionalProperties" and "'" in err.message:
        path.append(err.message.split("'")[1])
    return ".".join(str(p) for p in path) or "<root>"


def validate_document(doc) -> None:
    """Raise ``ConfigError`` naming every offending field."""
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([(_field_path(e), e.message) for e in errors])


def _num(v, where: str) -> float:
    if isinstance(v, bool):
        raise ConfigError([(where, "expected a number")])
    if isinstance(v, (int, float)):
        return float(v)
    try:
        return float(Fraction(str(v).replace(" ", "")))
    except (ValueError, ZeroDivisionError):
        raise ConfigError([(where, f"cannot parse {v!r} as a number")]) from None


def parse_config(doc: dict) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from a parsed document."""
    if not isinstance(doc, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    validate_document(doc)
    sysd = doc["system"]
    try:
        system = SystemSpec(
            sysd["name"],
            {k: _num(v, f"system.params.{k}") for k, v in sysd.get("params", {}).items()},
            tuple(_num(v, "system.initial_condition") for v in sysd.get("initial_condition", ())),
        )
    except InvalidConfigError as exc:
        raise ConfigError([("system", str(exc))]) from None
    except ValueError as exc:
        raise ConfigError([("system.initial_condition", str(exc))]) from None

    sim = doc["simulation"]
    tr = doc["training"]
    net = tr["network"]
    unknown = tuple(tr["unknown_indices"])
    try:
        net_spec = MLPSpec(int(net.get("input_dim", system.dim)), tuple(net["hidden"]),
                           int(net.get("output_dim", len(set(unknown)))),
                           net.get("activation", "gelu_tanh"))
    except (InvalidConfigError, ValueError) as exc:
        raise ConfigError([("training.network", str(exc))]) from None
    opt = tr.get("optimizer", {})
    schedule = Schedule(
        adam_lr=_num(opt.get("adam_lr", Schedule.adam_lr), "training.optimizer.adam_lr"),
        adam_iters=int(opt.get("adam_iters", Schedule.adam_iters)),
        lbfgs_iters=int(opt.get("lbfgs_iters", Schedule.lbfgs_iters)),
        lbfgs_memory=int(opt.get("lbfgs_memory", Schedule.lbfgs_memory)),
    )
    srd = dict(doc.get("symbolic_regression", {}))
    budget = srd.pop("budget", "desk")
    try:
        sr = SR_BUDGETS[budget](**srd)
    except (InvalidConfigError, TypeError) as exc:
        raise ConfigError([("symbolic_regression", str(exc))]) from None
    analysis = doc.get("analysis", {})
    observed = tr.get("observed")
    try:
        mask = ObservationMask(tuple(observed)) if observed is not None else None
        cfg = ExperimentConfig(
            name=doc["name"],
            system=system,
            sim_span=tuple(_num(v, "simulation.span") for v in sim["span"]),
            sample_dt=_num(sim["sample_dt"], "simulation.sample_dt"),
            train_window=tuple(_num(v, "training.window") for v in tr["window"]),
            unknown_indices=unknown,
            net_spec=net_spec,
            mask=mask,
            noise_percent=_num(tr.get("noise_percent", 0.0), "training.noise_percent"),
            ensemble_size=int(tr.get("ensemble_size", 10)),
            schedule=schedule,
            sr=sr,
            master_seed=int(doc.get("seed", 0)),
            horizon=_num(sim["horizon"], "simulation.horizon") if "horizon" in sim else None,
            training_ranges=tuple(_num(v, "analysis.training_ranges")
                                  for v in analysis.get("training_ranges", ())),
            rmse_window=int(analysis.get("rmse_window", 20)),
            train_unobserved_ic=bool(tr.get("train_unobserved_ic", False)),
        )
    except ConfigError:
        raise
    except InvalidConfigError as exc:
        raise ConfigError([("training", str(exc))]) from None
    return cfg


def _sr_budget_name(sr: SRConfig) -> str:
    paper = SRConfig.paper()
    same = all(getattr(sr, k) == getattr(paper, k)
               for k in ("n_populations", "population_size", "iterations"))
    return "paper" if same else "desk"


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data form with a fixed key order; floats are kept exact."""
    budget = _sr_budget_name(cfg.sr)
    base = SR_BUDGETS[budget]()
    sr = {"budget": budget}
    sr.update({k: getattr(cfg.sr, k) for k in _SR_FIELDS if getattr(cfg.sr, k) != getattr(base, k)})
    return {
        "name": cfg.name,
        "seed": cfg.master_seed,
        "system": {
            "name": cfg.system.name,
            "params": dict(cfg.system.params),
            "initial_condition": list(cfg.system.initial_condition),
        },
        "simulation": {
            "span": list(cfg.sim_span),
            "sample_dt": cfg.sample_dt,
            "horizon": cfg.horizon,
        },
        "training": {
            "window": list(cfg.train_window),
            "unknown_indices": list(cfg.unknown_indices),
            "observed": list(cfg.mask.observed),
            "noise_percent": cfg.noise_percent,
            "ensemble_size": cfg.ensemble_size,
            "train_unobserved_ic": cfg.train_unobserved_ic,
            "network": cfg.net_spec.to_dict(),
            "optimizer": {
                "adam_lr": cfg.schedule.adam_lr,
                "adam_iters": cfg.schedule.adam_iters,
                "lbfgs_iters": cfg.schedule.lbfgs_iters,
                "lbfgs_memory": cfg.schedule.lbfgs_memory,
            },
        },
        "symbolic_regression": sr,
        "analysis": {
            "training_ranges": list(cfg.training_ranges),
            "rmse_window": cfg.rmse_window,
        },
    }


class _Dumper(yaml.SafeDumper):
    pass


def _float_repr(dumper, value: float):
    # repr round-trips every double; YAML needs a dot or exponent to read a float back
    text = repr(float(value))
    if text in ("inf", "-inf", "nan"):
        text = {"inf": ".inf", "-inf": "-.inf", "nan": ".nan"}[text]
    elif "." not in text and "e" not in text:
        text += ".0"
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_Dumper.add_representer(float, _float_repr)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    """YAML text of ``cfg``; written atomically when ``path`` is given."""
    text = yaml.dump(config_to_dict(cfg), Dumper=_Dumper, sort_keys=False,
                     default_flow_style=None, width=100)
    if path is not None:
        from .io import atomic_write_text
        atomic_write_text(path, text)
    return text


def load_config(path) -> ExperimentConfig:
    """Read a YAML/JSON config file (or a preset name such as ``lv3-paper``)."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = preset_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc.strerror}")]) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
    return parse_config(doc)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError([("<preset>", f"unknown preset {name!r}; known: {sorted(PRESETS)}")])
    return Path(str(resources.files("eqd").joinpath(f"presets/{name}.yaml")))


def load_preset(name: str) -> ExperimentConfig:
    return load_config(preset_path(name))


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; independent of key order in the file."""
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def with_cli_overrides(cfg: ExperimentConfig, seed=None, noise=None, sr_budget=None,
                       jobs=None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["master_seed"] = int(seed)
    if noise is not None:
        changes["noise_percent"] = float(noise)
    if sr_budget is not None:
        keep = {k: getattr(cfg.sr, k) for k in _SR_FIELDS
                if k not in ("n_populations", "population_size", "iterations")}
        changes["sr"] = SR_BUDGETS[sr_budget](**keep)
    if jobs is not None:
        changes["sr"] = replace(changes.get("sr", cfg.sr), jobs=int(jobs))
    return replace(cfg, **changes) if changes else cfg
