"""Sweeps over primary load, cooperative vs non-cooperative runs, metrics and CSV output."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _engine
from .rl import Hyper, LevelScheme, Policy, RewardParams, train
from .simcore import (
    COOPERATIVE_MASK,
    NON_COOPERATIVE_MASK,
    QUEUES,
    Action,
    ModelParams,
    initial_state,
)
from .stochastic import RngStream

log = logging.getLogger(__name__)

MODES = {"cooperative": COOPERATIVE_MASK, "non-cooperative": NON_COOPERATIVE_MASK}


@dataclass(frozen=True)
class OracleSettings:
    capacity: int = 2
    n_levels: int = 2
    thresholds: tuple[int, ...] = ()
    lambda_p: float = 0.5
    omega: float = 0.5
    train_horizon: int = 300_000
    eval_horizon: int = 1_000_000
    seeds: int = 3
    tol: float = 1e-9
    max_states: int = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelParams = field(default_factory=ModelParams.defaults)
    penalty_k: float = 10.0
    omegas: tuple[float, ...] = (0.5,)
    literal_relay_penalty: bool = False
    scheme: LevelScheme = field(default_factory=LevelScheme)
    hyper: Hyper = field(default_factory=Hyper)
    lambda_p_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    eval_horizon: int = 100_000
    replications: int = 5
    base_seed: int = 1
    modes: tuple[str, ...] = ("cooperative", "non-cooperative")
    curve_window: int = 1000
    oracle: OracleSettings = field(default_factory=OracleSettings)

    def __post_init__(self) -> None:
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}; expected one of {sorted(MODES)}")
        if self.eval_horizon < 1 or self.hyper.horizon < 1:
            raise ValueError("horizons must be >= 1")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.omegas or not self.lambda_p_grid or not self.modes:
            raise ValueError("omegas, lambda_p_grid and modes must be nonempty")
        for name, values in (("omega", self.omegas), ("lambda_p", self.lambda_p_grid)):
            bad = [v for v in values if not 0.0 <= v <= 1.0]
            if bad:
                raise ValueError(f"{name} values must lie in [0, 1], got {bad}")

    def reward_params(self, omega: float | None = None) -> RewardParams:
        return RewardParams(self.omegas[0] if omega is None else omega, self.penalty_k,
                            self.literal_relay_penalty)


@dataclass(frozen=True)
class MetricsRecord:
    primary_throughput: float
    secondary_throughput: float
    relayed_throughput: float
    mean_q_p: float
    mean_q_pe: float
    mean_q_s: float
    mean_q_ps: float
    mean_q_se: float
    drops_p: int
    drops_pe: int
    drops_s: int
    drops_ps: int
    drops_se: int
    energy_wasted_rate: float
    collision_rate: float
    mean_reward: float
    slots: int

    @classmethod
    def from_accumulator(cls, acc: np.ndarray) -> MetricsRecord:
        n = acc[_engine.M_SLOTS]
        qlen = acc[_engine.M_QLEN : _engine.M_QLEN + 5] / n
        drops = acc[_engine.M_DROPS : _engine.M_DROPS + 5]
        return cls(
            primary_throughput=(acc[_engine.M_DIRECT] + acc[_engine.M_RELAYED]) / n,
            secondary_throughput=acc[_engine.M_SECONDARY] / n,
            relayed_throughput=acc[_engine.M_RELAYED] / n,
            **{f"mean_q_{k}": float(v) for k, v in zip(QUEUES, qlen)},
            **{f"drops_{k}": int(v) for k, v in zip(QUEUES, drops)},
            energy_wasted_rate=acc[_engine.M_WASTED] / n,
            collision_rate=acc[_engine.M_COLLISION] / n,
            mean_reward=acc[_engine.M_REWARD] / n,
            slots=int(n),
        )


def simulate_policy(actions: np.ndarray, params: ModelParams, reward_params: RewardParams,
                    scheme: LevelScheme, horizon: int, seed: int, *,
                    full_state: bool = False) -> MetricsRecord:
    """Run ``horizon`` slots under a fixed policy, no exploration or learning.

    ``actions`` is indexed by the quantized observation, or by the exact
    network state when ``full_state`` is set (oracle policies).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = RngStream(seed)
    arrays = _engine.model_arrays(params)
    st = _engine.state_to_array(initial_state(params, rng))
    thresholds = np.array(scheme.thresholds, dtype=np.int64)
    pol = np.ascontiguousarray(actions, dtype=np.int64)
    kind = _engine.POLICY_FULL_STATE if full_state else _engine.POLICY_OBSERVED
    acc = np.zeros(_engine.N_METRICS)
    done = 0
    while done < horizon:
        n = min(_engine.CHUNK, horizon - done)
        _engine.evaluate_chunk(st, pol, kind, _engine.draw_block(rng, n), *arrays,
                               thresholds, scheme.n_levels, reward_params.omega,
                               reward_params.penalty_k, reward_params.literal_relay_penalty,
                               acc)
        done += n
    return MetricsRecord.from_accumulator(acc)


@dataclass
class Trace:
    pre: np.ndarray  # (n, 13) slot-start state in engine layout
    outcome: np.ndarray  # (n, 16) indicators and drops
    rewards: np.ndarray
    actions: np.ndarray
    final: np.ndarray


def trace_actions(actions: Sequence[int], params: ModelParams, reward_params: RewardParams,
                  seed: int, *, start: np.ndarray | None = None) -> Trace:
    """Replay a fixed action sequence through the compiled engine and keep every slot."""
    rng = RngStream(seed)
    arrays = _engine.model_arrays(params)
    st = (_engine.state_to_array(initial_state(params, rng)) if start is None
          else np.array(start, dtype=np.int64))
    acts = np.ascontiguousarray(actions, dtype=np.int64)
    n = len(acts)
    pre = np.empty((n, 13), dtype=np.int64)
    out = np.empty((n, _engine.N_OUT), dtype=np.int64)
    rewards = np.empty(n)
    done = 0
    while done < n:
        m = min(_engine.CHUNK, n - done)
        sl = slice(done, done + m)
        _engine.trace_chunk(st, acts[sl], _engine.draw_block(rng, m), *arrays,
                            reward_params.omega, reward_params.penalty_k,
                            reward_params.literal_relay_penalty, pre[sl], out[sl], rewards[sl])
        done += m
    return Trace(pre, out, rewards, acts, st.copy())


def evaluate(policy: Policy, config: ExperimentConfig, seed: int, *,
             lambda_p: float | None = None, omega: float | None = None) -> MetricsRecord:
    params = config.model if lambda_p is None else config.model.with_lambda_p(lambda_p)
    return simulate_policy(policy.actions, params, config.reward_params(omega), config.scheme,
                           config.eval_horizon, seed)


def derive_seed(*components: object) -> int:
    """Stable 64-bit seed from a tuple of ints/floats/strings."""
    h = hashlib.blake2b(digest_size=8)
    for c in components:
        if isinstance(c, bool) or not isinstance(c, (int, float, str)):
            raise TypeError(f"unsupported seed component {c!r}")
        if isinstance(c, int):
            h.update(b"i" + struct.pack("<Q", c % 2**64))
        elif isinstance(c, float):
            h.update(b"f" + struct.pack("<d", c))
        else:
            h.update(b"s" + c.encode("utf-8") + b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Cell:
    lambda_index: int
    lambda_p: float
    omega_index: int
    omega: float
    mode: str
    replication: int

    def seed(self, base_seed: int) -> int:
        # mode is left out on purpose: both modes of a replication see the
        # same arrival and link realisations
        return derive_seed(base_seed, self.lambda_index, self.omega_index, self.replication)


@dataclass(frozen=True)
class CellFailure:
    cell: Cell
    error: str


@dataclass
class SweepResult:
    rows: list[dict]
    failures: list[CellFailure]


def sweep_cells(config: ExperimentConfig) -> list[Cell]:
    return [
        Cell(li, lp, oi, om, mode, rep)
        for li, lp in enumerate(config.lambda_p_grid)
        for oi, om in enumerate(config.omegas)
        for mode in config.modes
        for rep in range(config.replications)
    ]


def run_cell(config: ExperimentConfig, cell: Cell) -> dict:
    seed = cell.seed(config.base_seed)
    params = config.model.with_lambda_p(cell.lambda_p)
    mask = MODES[cell.mode]
    result = train(params, config.reward_params(cell.omega), config.scheme, config.hyper,
                   mask, seed, window=config.curve_window)
    metrics = simulate_policy(result.policy.actions, params, config.reward_params(cell.omega),
                              config.scheme, config.eval_horizon, derive_seed(seed, "eval"))
    row = {"mode": cell.mode, "omega": cell.omega, "lambda_p": cell.lambda_p,
           "replication": cell.replication, "seed": seed}
    row.update(asdict(metrics))
    return row


def _thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("COGRELAY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer COGRELAY_THREADS=%r", env)
    return 1


def run_sweep(config: ExperimentConfig, *, threads: int | None = None,
              progress: Callable[[Cell], None] | None = None,
              cell_runner: Callable[[ExperimentConfig, Cell], dict] = run_cell) -> SweepResult:
    """Train then evaluate every (lambda_p, omega, mode, replication) cell.

    A failing cell is recorded with its coordinates and the others still run.
    Rows come back in cell order regardless of thread scheduling.
    """
    cells = sweep_cells(config)

    def work(cell: Cell):
        try:
            row = cell_runner(config, cell)
        except Exception as exc:  # noqa: BLE001 - reported per cell
            log.error("cell %s failed: %s", cell, exc)
            return CellFailure(cell, f"{type(exc).__name__}: {exc}")
        if progress is not None:
            progress(cell)
        return row

    n = _thread_count(threads)
    if n == 1:
        results = [work(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(work, cells))
    rows = [r for r in results if isinstance(r, dict)]
    failures = [r for r in results if isinstance(r, CellFailure)]
    return SweepResult(rows, failures)


CSV_COLUMNS = (
    "mode", "omega", "lambda_p", "replication", "seed",
    "primary_throughput", "secondary_throughput", "relayed_throughput",
    "mean_q_p", "mean_q_pe", "mean_q_s", "mean_q_ps", "mean_q_se",
    "drops_p", "drops_s", "drops_ps",
    "energy_wasted_rate", "collision_rate", "mean_reward",
)
_INT_COLUMNS = {"replication", "seed", "drops_p", "drops_s", "drops_ps"}
_STR_COLUMNS = {"mode"}


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.6g}"


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def metrics_to_csv(metrics: MetricsRecord, **coords) -> str:
    row = dict(coords)
    row.update(asdict(metrics))
    return rows_to_csv([row], tuple(coords) + tuple(f.name for f in fields(MetricsRecord)))


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in _STR_COLUMNS:
                    row[k] = v
                elif k in _INT_COLUMNS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int

    @property
    def sem(self) -> float:
        return self.std / np.sqrt(self.n) if self.n > 1 else 0.0


def summarize(rows: Iterable[dict], metric: str) -> dict[tuple[str, float, float], Summary]:
    """Sample mean and standard deviation over replications, keyed by (mode, omega, lambda_p)."""
    groups: dict[tuple[str, float, float], list[float]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["omega"], r["lambda_p"]), []).append(r[metric])
    return {
        k: Summary(float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
        for k, v in groups.items()
    }


def with_overrides(config: ExperimentConfig, *, seed: int | None = None,
                   modes: Sequence[str] | None = None, omegas: Sequence[float] | None = None,
                   grid_points: int | None = None, replications: int | None = None
                   ) -> ExperimentConfig:
    """Apply CLI-style overrides. ``grid_points=n`` gives ``i/(n+1)`` for i=1..n."""
    changes: dict = {}
    if seed is not None:
        changes["base_seed"] = seed
    if modes is not None:
        changes["modes"] = tuple(modes)
    if omegas is not None:
        changes["omegas"] = tuple(float(o) for o in omegas)
    if grid_points is not None:
        if grid_points < 1:
            raise ValueError("grid needs at least one point")
        changes["lambda_p_grid"] = tuple(
            round(i / (grid_points + 1), 12) for i in range(1, grid_points + 1))
    if replications is not None:
        changes["replications"] = replications
    return replace(config, **changes)


__all__ = [
    "Action", "Cell", "CellFailure", "ExperimentConfig", "MetricsRecord", "MODES",
    "OracleSettings", "SweepResult", "Summary", "derive_seed", "evaluate", "read_sweep_csv",
    "rows_to_csv", "run_cell", "run_sweep", "simulate_policy", "summarize", "sweep_cells",
    "Trace", "trace_actions", "with_overrides",
]
