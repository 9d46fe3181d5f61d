"""YAML experiment config: parsing, validation with key paths, conversion."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import yaml

from .experiment import MODES, ExperimentConfig, OracleSettings
from .rl import Hyper, LevelScheme
from .simcore import ARRIVAL_QUEUES, LINKS, QUEUES, ModelParams
from .stochastic import ChannelParams, MmbpParams

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}" if self.path else self.message


class ConfigError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


def default_config_path() -> Path:
    return Path(str(resources.files("cogrelay") / "data" / "default.yaml"))


# field checkers return an error message or None

def _number(v: Any) -> float | None:
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        # PyYAML reads "1e-9" (no dot) as a string
        try:
            return float(v)
        except ValueError:
            return None
    return None


def prob(v):
    x = _number(v)
    if x is None:
        return "expected a number"
    if not 0.0 <= x <= 1.0:
        return f"must be a probability in [0, 1], got {v}"
    return None


def positive_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        return "expected an integer"
    if v < 1:
        return f"must be >= 1, got {v}"
    return None


def nonneg_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        return "expected an integer"
    if v < 0:
        return f"must be >= 0, got {v}"
    return None


def flag(v):
    return None if isinstance(v, bool) else "expected true or false"


def nonneg_number(v):
    x = _number(v)
    if x is None:
        return "expected a number"
    return None if x >= 0 else f"must be >= 0, got {v}"


def positive_number(v):
    x = _number(v)
    if x is None:
        return "expected a number"
    return None if x > 0 else f"must be > 0, got {v}"


def learning_rate(v):
    x = _number(v)
    if x is None:
        return "expected a number"
    return None if 0.0 < x <= 1.0 else f"learning rate must be in (0, 1], got {v}"


def discount(v):
    x = _number(v)
    if x is None:
        return "expected a number"
    if x >= 1.0:
        return f"discount must be < 1 to ensure convergence of the sum, got {v}"
    if x < 0.0:
        return f"discount must be >= 0, got {v}"
    return None


def list_of(check: Callable, nonempty: bool = True):
    def _check(v):
        if not isinstance(v, list):
            return "expected a list"
        if nonempty and not v:
            return "must not be empty"
        for i, item in enumerate(v):
            msg = check(item)
            if msg:
                return f"item {i}: {msg}"
        return None
    return _check


def modes(v):
    if not isinstance(v, list) or not v:
        return "expected a nonempty list"
    bad = [m for m in v if m not in MODES]
    if bad:
        return f"unknown mode(s) {bad}; expected {sorted(MODES)}"
    if len(set(v)) != len(v):
        return "modes must not repeat"
    return None


def _mmbp():
    return {"lambda": prob, "beta": prob}


def _channel():
    return {"gamma": prob, "q": prob}


SCHEMA: dict = {
    "schema_version": positive_int,
    "model": {
        "lambda_p": prob,
        "capacities": {k: positive_int for k in QUEUES},
        "arrivals": {k: _mmbp() for k in ARRIVAL_QUEUES if k != "p"},
        "channels": {k: _channel() for k in LINKS},
        "primary_decodes_on_accept": flag,
    },
    "reward": {
        "penalty_k": nonneg_number,
        "omegas": list_of(prob),
        "literal_relay_penalty": flag,
    },
    "levels": {
        "n_levels": positive_int,
        "thresholds": list_of(positive_int, nonempty=False),
    },
    "learning": {
        "alpha": learning_rate,
        "gamma": discount,
        "mu": prob,
        "explore_fraction": prob,
        "train_horizon": positive_int,
        "curve_window": positive_int,
    },
    "experiment": {
        "lambda_p_grid": list_of(prob),
        "eval_horizon": positive_int,
        "replications": positive_int,
        "base_seed": nonneg_int,
        "modes": modes,
    },
    "oracle": {
        "capacity": positive_int,
        "n_levels": positive_int,
        "thresholds": list_of(positive_int, nonempty=False),
        "lambda_p": prob,
        "omega": prob,
        "train_horizon": positive_int,
        "eval_horizon": positive_int,
        "seeds": positive_int,
        "tol": positive_number,
        "max_states": positive_int,
    },
}


def _walk(schema: dict, data: Any, path: str, out: list[Diagnostic]) -> None:
    if not isinstance(data, dict):
        out.append(Diagnostic(path, "expected a mapping"))
        return
    for key, sub in schema.items():
        p = f"{path}.{key}" if path else key
        if key not in data:
            out.append(Diagnostic(p, "missing key"))
        elif isinstance(sub, dict):
            _walk(sub, data[key], p, out)
        else:
            msg = sub(data[key])
            if msg:
                out.append(Diagnostic(p, msg))
    for key in data:
        if key not in schema:
            p = f"{path}.{key}" if path else str(key)
            out.append(Diagnostic(p, "unknown key"))


def _scheme_issues(levels: dict, caps: dict | int, path: str) -> list[Diagnostic]:
    try:
        scheme = LevelScheme(levels["n_levels"], tuple(levels["thresholds"]))
    except (ValueError, TypeError) as exc:
        return [Diagnostic(f"{path}.thresholds", str(exc))]
    out = []
    for k in ("s", "ps", "se"):
        cap = caps if isinstance(caps, int) else caps[k]
        try:
            scheme.check_capacity(cap)
        except ValueError as exc:
            out.append(Diagnostic(f"{path}.thresholds", f"Q_{k}: {exc}"))
    return out


def validate_mapping(data: Any) -> list[Diagnostic]:
    """Every problem in a parsed config, each tagged with its dotted key path."""
    out: list[Diagnostic] = []
    _walk(SCHEMA, data, "", out)
    if out:
        return out
    if data["schema_version"] != SCHEMA_VERSION:
        out.append(Diagnostic("schema_version",
                              f"unsupported version {data['schema_version']}, expected {SCHEMA_VERSION}"))
    out += _scheme_issues(data["levels"], data["model"]["capacities"], "levels")
    out += _scheme_issues({"n_levels": data["oracle"]["n_levels"],
                           "thresholds": data["oracle"]["thresholds"]},
                          data["oracle"]["capacity"], "oracle")
    return out


def parse_text(text: str) -> Any:
    """YAML -> Python; parse errors become a ConfigError carrying line and column."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError([Diagnostic("", f"parse error at {where}{problem}")]) from exc


def from_mapping(data: dict) -> ExperimentConfig:
    diags = validate_mapping(data)
    if diags:
        raise ConfigError(diags)
    m, r, lv, ln, ex, orc = (data[k] for k in
                             ("model", "reward", "levels", "learning", "experiment", "oracle"))
    lam_p = float(m["lambda_p"])
    arrivals = {"p": MmbpParams(lam_p, lam_p)}
    arrivals.update({k: MmbpParams(float(v["lambda"]), float(v["beta"]))
                     for k, v in m["arrivals"].items()})
    model = ModelParams(
        capacities={k: int(v) for k, v in m["capacities"].items()},
        arrivals=arrivals,
        channels={k: ChannelParams(float(v["gamma"]), float(v["q"]))
                  for k, v in m["channels"].items()},
        primary_decodes_on_accept=m["primary_decodes_on_accept"],
    )
    return ExperimentConfig(
        model=model,
        penalty_k=float(r["penalty_k"]),
        omegas=tuple(float(o) for o in r["omegas"]),
        literal_relay_penalty=r["literal_relay_penalty"],
        scheme=LevelScheme(lv["n_levels"], tuple(lv["thresholds"])),
        hyper=Hyper(float(ln["alpha"]), float(ln["gamma"]), float(ln["mu"]),
                    ln["train_horizon"], float(ln["explore_fraction"])),
        lambda_p_grid=tuple(float(x) for x in ex["lambda_p_grid"]),
        eval_horizon=ex["eval_horizon"],
        replications=ex["replications"],
        base_seed=ex["base_seed"],
        modes=tuple(ex["modes"]),
        curve_window=ln["curve_window"],
        oracle=OracleSettings(
            capacity=orc["capacity"],
            n_levels=orc["n_levels"],
            thresholds=tuple(orc["thresholds"]),
            lambda_p=float(orc["lambda_p"]),
            omega=float(orc["omega"]),
            train_horizon=orc["train_horizon"],
            eval_horizon=orc["eval_horizon"],
            seeds=orc["seeds"],
            tol=float(orc["tol"]),
            max_states=orc["max_states"],
        ),
    )


def load_config(path=None) -> ExperimentConfig:
    path = default_config_path() if path is None else Path(path)
    return from_mapping(parse_text(path.read_text()))


def validate_file(path) -> list[Diagnostic]:
    try:
        data = parse_text(Path(path).read_text())
    except ConfigError as exc:
        return exc.diagnostics
    return validate_mapping(data)
