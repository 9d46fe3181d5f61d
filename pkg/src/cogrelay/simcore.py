"""Slotted two-user network: five finite queues, four links, four CR actions.

Per slot, every service and arrival indicator is computed from the slot-start
state, departures are applied before arrivals, and finally the four links
advance to the values the CR will observe at the start of the next slot.

Queue keys are ``p, pe, s, ps, se`` (PU data, PU energy, SU data, relay, SU
energy) and link keys are ``p, s, ps, sp``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple

from .stochastic import (
    ChannelParams,
    DegenerateChainError,
    MmbpParams,
    RngStream,
    channel_stationary_on_prob,
    channel_step,
    mmbp_stationary_arrival_prob,
    mmbp_step,
)

QUEUES = ("p", "pe", "s", "ps", "se")
ARRIVAL_QUEUES = ("p", "pe", "s", "se")
LINKS = ("p", "s", "ps", "sp")


class Action(enum.IntEnum):
    TRANSMIT_OWN = 0
    TRANSMIT_RELAY = 1
    ACCEPT_PRIMARY = 2
    IDLE = 3

    A1 = 0
    A2 = 1
    A3 = 2
    A4 = 3


COOPERATIVE_MASK = (Action.A1, Action.A2, Action.A3, Action.A4)
NON_COOPERATIVE_MASK = (Action.A1, Action.A4)


@dataclass(frozen=True)
class QueueState:
    len: int
    capacity: int

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {self.capacity}")
        if not 0 <= self.len <= self.capacity:
            raise ValueError(f"queue length {self.len} outside [0, {self.capacity}]")

    @property
    def nonempty(self) -> int:
        return 1 if self.len > 0 else 0

    @property
    def full(self) -> int:
        return 1 if self.len >= self.capacity else 0

    def evolve(self, served: int, arrived: int) -> tuple[QueueState, int]:
        """Departures first, then arrivals, capped at capacity; returns (queue, dropped)."""
        level = max(self.len - served, 0) + arrived
        dropped = max(level - self.capacity, 0)
        return QueueState(level - dropped, self.capacity), dropped


def _default_arrivals(lambda_p: float) -> dict[str, MmbpParams]:
    return {
        "p": MmbpParams(lambda_p, lambda_p),
        "pe": MmbpParams(0.4, 0.4),
        "s": MmbpParams(0.4, 0.4),
        "se": MmbpParams(0.8, 0.4),
    }


def _default_channels() -> dict[str, ChannelParams]:
    return {
        "p": ChannelParams(0.2, 0.4),
        "s": ChannelParams(0.6, 0.1),
        "ps": ChannelParams(0.7, 0.2),
        "sp": ChannelParams(0.8, 0.05),
    }


@dataclass(frozen=True)
class ModelParams:
    """Capacities, arrival chains and link chains.

    ``primary_decodes_on_accept`` switches the primary service rule: when set,
    the primary destination also decodes under the accept action whenever the
    direct link is ON. By default the accept action gets no direct service.
    """

    capacities: Mapping[str, int] = field(default_factory=lambda: dict.fromkeys(QUEUES, 20))
    arrivals: Mapping[str, MmbpParams] = field(default_factory=lambda: _default_arrivals(0.5))
    channels: Mapping[str, ChannelParams] = field(default_factory=_default_channels)
    primary_decodes_on_accept: bool = False

    def __post_init__(self) -> None:
        if set(self.capacities) != set(QUEUES):
            raise ValueError(f"capacities must have keys {QUEUES}")
        if set(self.arrivals) != set(ARRIVAL_QUEUES):
            raise ValueError(f"arrivals must have keys {ARRIVAL_QUEUES}")
        if set(self.channels) != set(LINKS):
            raise ValueError(f"channels must have keys {LINKS}")
        for k, b in self.capacities.items():
            if int(b) < 1:
                raise ValueError(f"capacity of Q_{k} must be >= 1, got {b}")

    @classmethod
    def defaults(cls, lambda_p: float = 0.5, capacity: int = 20) -> ModelParams:
        return cls(
            capacities=dict.fromkeys(QUEUES, capacity),
            arrivals=_default_arrivals(lambda_p),
            channels=_default_channels(),
        )

    def with_lambda_p(self, lambda_p: float) -> ModelParams:
        arrivals = dict(self.arrivals)
        arrivals["p"] = MmbpParams(lambda_p, lambda_p)
        return replace(self, arrivals=arrivals)


@dataclass(frozen=True)
class NetworkState:
    q_p: QueueState
    q_pe: QueueState
    q_s: QueueState
    q_ps: QueueState
    q_se: QueueState
    ch_p: int
    ch_s: int
    ch_ps: int
    ch_sp: int
    arr_p: int
    arr_pe: int
    arr_s: int
    arr_se: int
    slot: int = 0

    def queue(self, key: str) -> QueueState:
        return getattr(self, f"q_{key}")


@dataclass(frozen=True)
class SlotOutcome:
    """Service/arrival indicators of one slot plus derived bookkeeping flags.

    ``r_s`` and ``r_ps`` are effective deliveries: they also require the source
    queue to be nonempty, so a transmission from an empty queue never counts.
    """

    r_s: int
    r_ps: int
    a_ps_in: int
    r_se: int
    r_p: int
    r_pe: int
    pu_active: int
    direct_delivery: int
    relayed_delivery: int
    collision: int
    energy_wasted: int
    arrivals_p: int = 0
    arrivals_pe: int = 0
    arrivals_s: int = 0
    arrivals_se: int = 0
    drops: tuple[int, int, int, int, int] = (0, 0, 0, 0, 0)


class Observation(NamedTuple):
    """What the CR sees at decision time. PU queue lengths are never exposed."""

    pu_active: int
    q_ps: int
    q_se: int
    q_s: int
    ch_sp: int
    ch_s: int
    ch_p: int
    ch_ps: int


def empty_state(params: ModelParams, *, channels: Mapping[str, int] | None = None,
                chains: Mapping[str, int] | None = None) -> NetworkState:
    """All queues empty; links and arrival chains pinned (default all 0)."""
    ch = {k: 0 for k in LINKS} | dict(channels or {})
    ar = {k: 0 for k in ARRIVAL_QUEUES} | dict(chains or {})
    caps = params.capacities
    return NetworkState(
        *(QueueState(0, int(caps[k])) for k in QUEUES),
        ch["p"], ch["s"], ch["ps"], ch["sp"],
        ar["p"], ar["pe"], ar["s"], ar["se"],
    )


def initial_state(params: ModelParams, rng: RngStream) -> NetworkState:
    """Empty queues, links and arrival chains drawn from their stationary laws.

    A chain without a unique stationary law starts in state 0. Draws come from
    the ``init`` substream so they never disturb the per-process streams.
    """
    init = rng.substream("init")
    chains = {}
    for k in ARRIVAL_QUEUES:
        u = init.uniform()
        try:
            chains[k] = 1 if u < mmbp_stationary_arrival_prob(params.arrivals[k]) else 0
        except DegenerateChainError:
            chains[k] = 0
    channels = {}
    for k in LINKS:
        u = init.uniform()
        try:
            channels[k] = 1 if u < channel_stationary_on_prob(params.channels[k]) else 0
        except DegenerateChainError:
            channels[k] = 0
    return empty_state(params, channels=channels, chains=chains)


def pu_active(state: NetworkState) -> int:
    return state.q_p.nonempty * state.q_pe.nonempty


def service_indicators(state: NetworkState, action: Action, *,
                       primary_decodes_on_accept: bool = False) -> SlotOutcome:
    """Indicators for one slot, all evaluated on the slot-start state.

    Arrival fields of the returned record are left at zero; :func:`step` fills them.
    """
    a = Action(action)
    a1, a2, a3, a4 = (int(a == x) for x in COOPERATIVE_MASK)
    act = pu_active(state)
    i_p, i_pe = state.q_p.nonempty, state.q_pe.nonempty
    i_s, i_ps, i_se = state.q_s.nonempty, state.q_ps.nonempty, state.q_se.nonempty
    ps_room = 1 - state.q_ps.full

    r_s = a1 * state.ch_s * (1 - act) * i_se * i_s
    r_ps = a2 * state.ch_sp * (1 - act) * i_se * i_ps
    a_ps_in = a3 * state.ch_ps * i_p * i_pe * (1 - state.ch_p) * ps_room
    r_se = a1 * i_s + a2 * i_ps
    relay_path = a3 * state.ch_ps * (1 - state.ch_p) * ps_room
    direct_ok = a4 + a3 if primary_decodes_on_accept else a4
    r_p = i_pe * (direct_ok * state.ch_p + relay_path)
    r_pe = i_p
    return SlotOutcome(
        r_s=r_s,
        r_ps=r_ps,
        a_ps_in=a_ps_in,
        r_se=r_se,
        r_p=r_p,
        r_pe=r_pe,
        pu_active=act,
        direct_delivery=direct_ok * state.ch_p * act,
        relayed_delivery=r_ps,
        collision=act * (a1 + a2),
        energy_wasted=i_se * r_se * (1 - r_s - r_ps),
    )


def step(state: NetworkState, action: Action, params: ModelParams,
         rng: RngStream) -> tuple[NetworkState, SlotOutcome]:
    """Advance one slot. ``rng`` is the run's root stream; each process draws
    from its own named substream (``arrival.<k>``, ``channel.<k>``)."""
    out = service_indicators(state, action,
                             primary_decodes_on_accept=params.primary_decodes_on_accept)

    chains = {}
    for k in ARRIVAL_QUEUES:
        chains[k], _ = mmbp_step(getattr(state, f"arr_{k}"), params.arrivals[k],
                                 rng.substream(f"arrival.{k}"))

    served = {"p": out.r_p, "pe": out.r_pe, "s": out.r_s, "ps": out.r_ps, "se": out.r_se}
    arrived = dict(chains, ps=out.a_ps_in)
    queues, drops = [], []
    for k in QUEUES:
        qk, dk = state.queue(k).evolve(served[k], arrived[k])
        queues.append(qk)
        drops.append(dk)

    links = {k: channel_step(getattr(state, f"ch_{k}"), params.channels[k],
                             rng.substream(f"channel.{k}"))
             for k in LINKS}

    nxt = NetworkState(
        *queues,
        links["p"], links["s"], links["ps"], links["sp"],
        chains["p"], chains["pe"], chains["s"], chains["se"],
        state.slot + 1,
    )
    out = replace(out, arrivals_p=chains["p"], arrivals_pe=chains["pe"],
                  arrivals_s=chains["s"], arrivals_se=chains["se"], drops=tuple(drops))
    return nxt, out


def observables(state: NetworkState) -> Observation:
    return Observation(
        pu_active(state),
        state.q_ps.len,
        state.q_se.len,
        state.q_s.len,
        state.ch_sp,
        state.ch_s,
        state.ch_p,
        state.ch_ps,
    )
