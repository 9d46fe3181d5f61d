"""Two-state Markov arrival (MMBP) and ON/OFF channel processes.

Both processes are sampled by inverse CDF on a single uniform draw per slot,
taken from a named :class:`RngStream` owned by that process instance.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MmbpParams",
    "ChannelParams",
    "RngStream",
    "DegenerateChainError",
    "mmbp_step",
    "mmbp_stationary_arrival_prob",
    "channel_step",
    "channel_stationary_on_prob",
]


class DegenerateChainError(ValueError):
    """The two-state chain has no unique stationary distribution."""


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be a probability in [0, 1], got {value!r}")


@dataclass(frozen=True)
class MmbpParams:
    """Markov-modulated Bernoulli arrivals.

    ``lam`` is P(no arrival next slot | no arrival this slot) and ``beta`` is
    P(no arrival next slot | arrival this slot).
    """

    lam: float
    beta: float

    def __post_init__(self) -> None:
        _check_prob("lambda", self.lam)
        _check_prob("beta", self.beta)


@dataclass(frozen=True)
class ChannelParams:
    """Gilbert-Elliott link: ``gamma`` = P(OFF -> ON), ``q`` = P(ON -> OFF)."""

    gamma: float
    q: float

    def __post_init__(self) -> None:
        _check_prob("gamma", self.gamma)
        _check_prob("q", self.q)


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


class RngStream:
    """Deterministic PCG64 stream with named, independent substreams.

    A substream is keyed by ``(seed, path of names)`` only, so adding or
    removing unrelated substreams never shifts another stream's draws.
    Substreams are memoized: asking twice for the same name returns the same
    object, which keeps its position.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = (), _path: str = "") -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = int(seed)
        self.path = _path
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key))
        )
        self._children: dict[str, RngStream] = {}

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    def substream(self, name: str) -> RngStream:
        child = self._children.get(name)
        if child is None:
            path = f"{self.path}/{name}" if self.path else name
            child = RngStream(self.seed, self._key + _name_key(name), path)
            self._children[name] = child
        return child

    def uniform(self) -> float:
        """One draw in [0, 1)."""
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` draws in [0, 1); identical to ``n`` successive :meth:`uniform` calls."""
        return self._gen.random(n)


def mmbp_step(state: int, params: MmbpParams, rng: RngStream) -> tuple[int, int]:
    """Advance the arrival chain one slot; returns ``(next_state, arrival)``.

    The chain state after the transition is the arrival indicator itself.
    """
    u = rng.uniform()
    stay_empty = params.lam if state == 0 else params.beta
    nxt = 0 if u < stay_empty else 1
    return nxt, nxt


def mmbp_stationary_arrival_prob(params: MmbpParams) -> float:
    denom = (1.0 - params.lam) + params.beta
    if denom <= 0.0:
        raise DegenerateChainError(
            "lambda=1 and beta=0: both states are absorbing, stationary law is not unique"
        )
    return (1.0 - params.lam) / denom


def channel_step(state: int, params: ChannelParams, rng: RngStream) -> int:
    u = rng.uniform()
    if state == 0:
        return 1 if u < params.gamma else 0
    return 0 if u < params.q else 1


def channel_stationary_on_prob(params: ChannelParams) -> float:
    denom = params.gamma + params.q
    if denom <= 0.0:
        raise DegenerateChainError(
            "gamma=q=0: both link states are absorbing, stationary law is not unique"
        )
    return params.gamma / denom
