"""Tabular Q-learning for the CR's action choice.

The learner sees only the quantized observation (PU activity, the levels of
its three queues and the four link bits). Rewards use the CR's exact
slot-start queue indicators, which it always knows.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from . import _engine
from ._io import atomic_write_bytes
from .simcore import (
    COOPERATIVE_MASK,
    Action,
    ModelParams,
    NetworkState,
    Observation,
    initial_state,
    observables,
    step,
)
from .stochastic import RngStream

N_ACTIONS = 4


@dataclass(frozen=True)
class LevelScheme:
    """Partition of a queue length into ``n_levels`` bands.

    Level 0 is the empty queue, level ``h`` covers ``(thresholds[h-2], thresholds[h-1]]``
    and the top level covers everything above the last threshold.
    """

    n_levels: int = 4
    thresholds: tuple[int, ...] = (6, 12)

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(int(x) for x in self.thresholds))
        if self.n_levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.n_levels}")
        if len(self.thresholds) != self.n_levels - 2:
            raise ValueError(
                f"{self.n_levels} levels need exactly {self.n_levels - 2} thresholds, "
                f"got {len(self.thresholds)}"
            )
        if any(t < 1 for t in self.thresholds):
            raise ValueError("thresholds must be >= 1")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {self.thresholds}")

    @property
    def n_states(self) -> int:
        return 32 * self.n_levels**3

    def check_capacity(self, capacity: int) -> None:
        if self.thresholds and self.thresholds[-1] >= capacity:
            raise ValueError(
                f"largest threshold {self.thresholds[-1]} must be below capacity {capacity}"
            )


def quantize_level(length: int, scheme: LevelScheme) -> int:
    if length < 0:
        raise ValueError(f"queue length must be >= 0, got {length}")
    if length == 0:
        return 0
    return 1 + sum(1 for th in scheme.thresholds if length > th)


class StateTuple(NamedTuple):
    pu_active: int
    level_ps: int
    level_se: int
    level_s: int
    ch_sp: int
    ch_s: int
    ch_p: int
    ch_ps: int


def encode_state(obs: Observation, scheme: LevelScheme) -> int:
    n = scheme.n_levels
    bits = obs.pu_active + 2 * obs.ch_sp + 4 * obs.ch_s + 8 * obs.ch_p + 16 * obs.ch_ps
    l_ps = quantize_level(obs.q_ps, scheme)
    l_se = quantize_level(obs.q_se, scheme)
    l_s = quantize_level(obs.q_s, scheme)
    return bits + 32 * (l_ps + n * (l_se + n * l_s))


def decode_state(index: int, scheme: LevelScheme) -> StateTuple:
    if not 0 <= index < scheme.n_states:
        raise ValueError(f"state index {index} outside [0, {scheme.n_states})")
    n = scheme.n_levels
    bits, rest = index % 32, index // 32
    l_ps, rest = rest % n, rest // n
    l_se, l_s = rest % n, rest // n
    return StateTuple(
        bits & 1, l_ps, l_se, l_s, (bits >> 1) & 1, (bits >> 2) & 1, (bits >> 3) & 1, (bits >> 4) & 1
    )


@dataclass(frozen=True)
class RewardParams:
    """``omega`` weighs own-queue service against relay service; ``penalty_k``
    is the cost per violated access rule.

    ``literal_relay_penalty`` makes the relay-transmit penalty test the PU->CR
    link instead of the CR->primary-destination link the relay transmission
    actually uses.
    """

    omega: float = 0.5
    penalty_k: float = 10.0
    literal_relay_penalty: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")
        if not self.penalty_k >= 0.0:
            raise ValueError(f"penalty_k must be >= 0, got {self.penalty_k}")


class RewardIndicators(NamedTuple):
    pu_active: int
    ch_p: int
    ch_s: int
    ch_ps: int
    ch_sp: int
    has_s: int
    has_ps: int
    has_se: int
    ps_full: int

    @classmethod
    def from_state(cls, state: NetworkState) -> RewardIndicators:
        return cls(
            state.q_p.nonempty * state.q_pe.nonempty,
            state.ch_p,
            state.ch_s,
            state.ch_ps,
            state.ch_sp,
            state.q_s.nonempty,
            state.q_ps.nonempty,
            state.q_se.nonempty,
            state.q_ps.full,
        )


def reward(ind: RewardIndicators, action: Action, r_s: int, r_ps: int,
           params: RewardParams) -> float:
    a = Action(action)
    a1, a2, a3 = int(a == Action.A1), int(a == Action.A2), int(a == Action.A3)
    act = ind.pu_active
    relay_ch = ind.ch_ps if params.literal_relay_penalty else ind.ch_sp
    pen = (act * (a1 + a2)
           + a1 * (1 - ind.ch_s * ind.has_s * ind.has_se)
           + a2 * (1 - relay_ch * ind.has_ps * ind.has_se)
           + a3 * ind.ps_full
           + a3 * (ind.ch_p * act + (1 - ind.ch_ps * act)))
    return (params.omega * r_s * ind.has_s + (1.0 - params.omega) * r_ps * ind.has_ps
            - params.penalty_k * pen)


@dataclass
class QTable:
    values: np.ndarray
    alpha: float = 0.5
    gamma: float = 0.9
    visits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_ACTIONS:
            raise ValueError(f"Q values must have shape (n_states, 4), got {self.values.shape}")
        if self.visits is None:
            self.visits = np.zeros(self.values.shape, dtype=np.int64)
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")

    @classmethod
    def zeros(cls, n_states: int, alpha: float = 0.5, gamma: float = 0.9) -> QTable:
        return cls(np.zeros((n_states, N_ACTIONS)), alpha, gamma)

    @property
    def n_states(self) -> int:
        return self.values.shape[0]


def _mask_array(mask: Sequence[Action]) -> np.ndarray:
    if not mask:
        raise ValueError("action mask must be nonempty")
    return np.array(sorted({int(Action(a)) for a in mask}), dtype=np.int64)


def q_update(table: QTable, s: int, a: Action, r: float, s_next: int,
             mask: Sequence[Action] = COOPERATIVE_MASK) -> QTable:
    if not math.isfinite(r):
        raise ValueError(f"reward must be finite, got {r!r}")
    q = table.values
    m = _mask_array(mask)
    nxt = q[s_next, m[0]]
    for a2 in m[1:]:
        if q[s_next, a2] > nxt:
            nxt = q[s_next, a2]
    a = int(a)
    q[s, a] += table.alpha * (r + table.gamma * nxt - q[s, a])
    table.visits[s, a] += 1
    return table


def exploration_cutoff(horizon: int, fraction: float = 0.6) -> int:
    """Number of leading slots (t < fraction * horizon) during which exploration is on."""
    return math.ceil(Fraction(str(fraction)) * horizon)


def select_action(table: QTable, s: int, mu: float, t: int, horizon: int,
                  mask: Sequence[Action], rng: RngStream,
                  explore_fraction: float = 0.6) -> Action:
    """Epsilon-greedy choice. Always consumes exactly two draws from ``rng``:
    the exploration coin, then the pick (random action or tie-break)."""
    m = _mask_array(mask)
    u_explore = rng.uniform()
    u_choice = rng.uniform()
    if t < exploration_cutoff(horizon, explore_fraction) and u_explore < mu:
        return Action(int(m[int(u_choice * len(m))]))
    row = table.values[s]
    best = row[m[0]]
    for a in m[1:]:
        if row[a] > best:
            best = row[a]
    ties = [a for a in m if row[a] == best]
    return Action(int(ties[int(u_choice * len(ties))]))


@dataclass(frozen=True)
class Policy:
    actions: np.ndarray
    mask: tuple[Action, ...] = COOPERATIVE_MASK

    def __post_init__(self) -> None:
        allowed = set(int(a) for a in self.mask)
        if not set(np.unique(self.actions).tolist()) <= allowed:
            raise ValueError("policy maps a state to an action outside its mask")

    def __call__(self, s: int) -> Action:
        return Action(int(self.actions[s]))

    def __len__(self) -> int:
        return len(self.actions)


def greedy_policy(table: QTable, mask: Sequence[Action] = COOPERATIVE_MASK) -> Policy:
    """Per-state argmax over the mask; ties go to the lowest action index."""
    m = _mask_array(mask)
    sub = table.values[:, m]
    return Policy(m[np.argmax(sub, axis=1)].astype(np.int64),
                  tuple(Action(int(a)) for a in m))


@dataclass(frozen=True)
class Hyper:
    alpha: float = 0.5
    gamma: float = 0.9
    mu: float = 0.05
    horizon: int = 300_000
    explore_fraction: float = 0.6


@dataclass
class TrainResult:
    table: QTable
    policy: Policy
    curve: np.ndarray  # rows of (slots completed, mean reward over the window)
    final_state: NetworkState


def _curve(rewards: np.ndarray, window: int) -> np.ndarray:
    n = len(rewards)
    ends = list(range(window, n + 1, window))
    if not ends or ends[-1] != n:
        ends.append(n)
    rows = []
    start = 0
    for end in ends:
        rows.append((end, float(np.mean(rewards[start:end]))))
        start = end
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def train(params: ModelParams, reward_params: RewardParams, scheme: LevelScheme,
          hyper: Hyper, mask: Sequence[Action] = COOPERATIVE_MASK, seed: int = 0, *,
          window: int = 1000, engine: str = "compiled") -> TrainResult:
    """One continuing episode of ``hyper.horizon`` slots of Q-learning.

    ``engine="reference"`` runs the slot loop through :func:`simcore.step` in
    pure Python; the default compiled engine gives the identical result faster.
    """
    if hyper.horizon < 1:
        raise ValueError("horizon must be >= 1")
    if window < 1:
        raise ValueError("window must be >= 1")
    scheme.check_capacity(min(params.capacities[k] for k in ("s", "ps", "se")))
    rng = RngStream(seed)
    table = QTable.zeros(scheme.n_states, hyper.alpha, hyper.gamma)
    state = initial_state(params, rng)
    if engine == "reference":
        rewards, state = _train_reference(state, table, params, reward_params, scheme,
                                           hyper, mask, rng)
    elif engine == "compiled":
        rewards, state = _train_compiled(state, table, params, reward_params, scheme,
                                         hyper, mask, rng)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return TrainResult(table, greedy_policy(table, mask), _curve(rewards, window), state)


def _train_reference(state, table, params, reward_params, scheme, hyper, mask, rng):
    agent = rng.substream("agent")
    rewards = np.empty(hyper.horizon)
    s = encode_state(observables(state), scheme)
    for t in range(hyper.horizon):
        a = select_action(table, s, hyper.mu, t, hyper.horizon, mask, agent,
                          hyper.explore_fraction)
        nxt, out = step(state, a, params, rng)
        r = reward(RewardIndicators.from_state(state), a, out.r_s, out.r_ps, reward_params)
        s_next = encode_state(observables(nxt), scheme)
        q_update(table, s, a, r, s_next, mask)
        rewards[t] = r
        state, s = nxt, s_next
    return rewards, state


def _train_compiled(state, table, params, reward_params, scheme, hyper, mask, rng):
    arrays = _engine.model_arrays(params)
    st = _engine.state_to_array(state)
    thresholds = np.array(scheme.thresholds, dtype=np.int64)
    m = _mask_array(mask)
    cutoff = exploration_cutoff(hyper.horizon, hyper.explore_fraction)
    agent = rng.substream("agent")
    rewards = np.empty(hyper.horizon)
    metrics = np.zeros(_engine.N_METRICS)
    t = 0
    while t < hyper.horizon:
        n = min(_engine.CHUNK, hyper.horizon - t)
        env_u = _engine.draw_block(rng, n)
        agent_u = agent.uniforms(2 * n).reshape(n, 2)
        _engine.train_chunk(
            st, table.values, table.visits, t, cutoff, hyper.mu, hyper.alpha, hyper.gamma,
            env_u, agent_u, m, *arrays, thresholds, scheme.n_levels,
            reward_params.omega, reward_params.penalty_k, reward_params.literal_relay_penalty,
            rewards[t : t + n], metrics,
        )
        t += n
    return rewards, _engine.array_to_state(st, arrays[0], state.slot + hyper.horizon)


# Q-table artifact:
#   b"CRQTABLE" | u32 version | u32 header length H | H bytes JSON header
#   | float64 LE values, row-major (n_states x 4) | uint64 LE visit counts (same shape)
QTABLE_MAGIC = b"CRQTABLE"
QTABLE_VERSION = 1


class QTableArtifact(NamedTuple):
    table: QTable
    scheme: LevelScheme
    mask: tuple[Action, ...]


def qtable_to_bytes(table: QTable, scheme: LevelScheme,
                    mask: Sequence[Action] = COOPERATIVE_MASK) -> bytes:
    header = {
        "n_levels": scheme.n_levels,
        "thresholds": list(scheme.thresholds),
        "mask": [int(a) for a in _mask_array(mask)],
        "alpha": table.alpha,
        "gamma": table.gamma,
        "n_states": table.n_states,
        "n_actions": N_ACTIONS,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([
        QTABLE_MAGIC,
        struct.pack("<II", QTABLE_VERSION, len(hbytes)),
        hbytes,
        table.values.astype("<f8").tobytes(order="C"),
        table.visits.astype("<u8").tobytes(order="C"),
    ])


def qtable_from_bytes(data: bytes) -> QTableArtifact:
    if data[:8] != QTABLE_MAGIC:
        raise ValueError("not a Q-table artifact (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != QTABLE_VERSION:
        raise ValueError(f"unsupported Q-table format version {version}")
    off = 16
    header = json.loads(data[off : off + hlen])
    off += hlen
    shape = (header["n_states"], header["n_actions"])
    size = shape[0] * shape[1] * 8
    values = np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape)
    visits = np.frombuffer(data, dtype="<u8", count=shape[0] * shape[1], offset=off + size)
    table = QTable(values.astype(np.float64), header["alpha"], header["gamma"],
                   visits.reshape(shape).astype(np.int64))
    scheme = LevelScheme(header["n_levels"], tuple(header["thresholds"]))
    return QTableArtifact(table, scheme, tuple(Action(a) for a in header["mask"]))


def save_qtable(path, table: QTable, scheme: LevelScheme,
                mask: Sequence[Action] = COOPERATIVE_MASK) -> None:
    atomic_write_bytes(path, qtable_to_bytes(table, scheme, mask))


def load_qtable(path) -> QTableArtifact:
    with open(path, "rb") as fh:
        return qtable_from_bytes(fh.read())
