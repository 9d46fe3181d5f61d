"""Exact value iteration over the full network state, for small capacities.

The oracle sees every queue length and arrival-chain state, so its policy
upper-bounds what the quantized learner can reach. States are indexed as::

    q = mixed radix over (p, pe, s, ps, se) with radix capacity + 1
    index = (q * 16 + links) * 16 + chains
    links  = ch_p + 2 ch_s + 4 ch_ps + 8 ch_sp
    chains = arr_p + 2 arr_pe + 4 arr_s + 8 arr_se

Next-slot chain bits are the arrivals, so a transition factors into the
chain transition (which also fixes the next queue lengths) times the
independent link transition.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .experiment import MetricsRecord, simulate_policy
from .rl import LevelScheme, Policy, RewardParams
from .simcore import ARRIVAL_QUEUES, LINKS, QUEUES, ModelParams

N_ACTIONS = 4


class StateSpaceTooLarge(ValueError):
    pass


def _bits(n_bits: int) -> np.ndarray:
    """Row i holds the binary digits of i, least significant first."""
    idx = np.arange(2**n_bits)
    return (idx[:, None] >> np.arange(n_bits)[None, :]) & 1


def _two_state_kernel(p_stay0: np.ndarray, p_leave1: np.ndarray) -> np.ndarray:
    """16x16 product of four independent 2-state chains.

    Per chain: P(0 -> 0) = p_stay0, P(1 -> 0) = p_leave1.
    """
    bits = _bits(4)
    out = np.ones((16, 16))
    for j in range(4):
        cur, nxt = bits[:, j][:, None], bits[:, j][None, :]
        p0 = np.where(cur == 0, p_stay0[j], p_leave1[j])
        out *= np.where(nxt == 0, p0, 1.0 - p0)
    return out


@dataclass
class OracleInstance:
    params: ModelParams
    reward_params: RewardParams
    gamma: float = 0.9
    max_states: int = 1_000_000
    caps: np.ndarray = field(init=False, repr=False)
    chain_kernel: np.ndarray = field(init=False, repr=False)
    link_kernel: np.ndarray = field(init=False, repr=False)
    rewards: np.ndarray = field(init=False, repr=False)
    successors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must be in [0, 1), got {self.gamma}")
        self.caps = np.array([int(self.params.capacities[k]) for k in QUEUES])
        if self.n_states > self.max_states:
            raise StateSpaceTooLarge(
                f"{self.n_states} exact states exceed the ceiling of {self.max_states}; "
                "use smaller queue capacities"
            )
        arr = self.params.arrivals
        ch = self.params.channels
        self.chain_kernel = _two_state_kernel(
            np.array([arr[k].lam for k in ARRIVAL_QUEUES]),
            np.array([arr[k].beta for k in ARRIVAL_QUEUES]))
        # link bit 0 means OFF: P(OFF -> OFF) = 1 - gamma, P(ON -> OFF) = q
        self.link_kernel = _two_state_kernel(
            np.array([1.0 - ch[k].gamma for k in LINKS]),
            np.array([ch[k].q for k in LINKS]))
        self._assemble()

    @property
    def n_queue_states(self) -> int:
        return int(np.prod(self.caps + 1))

    @property
    def n_states(self) -> int:
        return self.n_queue_states * 256

    def decode(self, index: int) -> dict:
        index, chains = divmod(int(index), 16)
        qidx, links = divmod(index, 16)
        lens = {}
        for k, c in zip(reversed(QUEUES), reversed(self.caps)):
            qidx, lens[k] = divmod(qidx, int(c) + 1)
        out = {f"q_{k}": lens[k] for k in QUEUES}
        out.update({f"ch_{k}": (links >> j) & 1 for j, k in enumerate(LINKS)})
        out.update({f"arr_{k}": (chains >> j) & 1 for j, k in enumerate(ARRIVAL_QUEUES)})
        return out

    def _assemble(self) -> None:
        """Rewards (NQ, 16, 4) and next queue index (NQ, 16, 4, 16) per chain outcome."""
        caps = self.caps
        nq = self.n_queue_states
        radix = caps + 1
        qidx = np.arange(nq)
        lens = np.empty((5, nq), dtype=np.int64)
        rest = qidx.copy()
        for i in range(4, -1, -1):
            lens[i] = rest % radix[i]
            rest //= radix[i]
        q_p, q_pe, q_s, q_ps, q_se = (lens[i][:, None] for i in range(5))  # (NQ, 1)
        lb = _bits(4)
        ch_p, ch_s, ch_ps, ch_sp = (lb[:, j][None, :] for j in range(4))  # (1, 16)

        i_p, i_pe, i_s = (q_p > 0) * 1, (q_pe > 0) * 1, (q_s > 0) * 1
        i_ps, i_se = (q_ps > 0) * 1, (q_se > 0) * 1
        act = i_p * i_pe
        room = (q_ps < caps[3]) * 1
        full = 1 - room
        rp = self.reward_params
        relay_ch = ch_ps if rp.literal_relay_penalty else ch_sp
        alt = self.params.primary_decodes_on_accept

        rewards = np.empty((nq, 16, N_ACTIONS))
        succ = np.empty((nq, 16, N_ACTIONS, 16), dtype=np.int64)
        cb = _bits(4)  # next chain bits = arrivals for p, pe, s, se
        arrivals = [cb[:, j][None, None, :] for j in range(4)]
        spread = np.zeros_like(ch_p)  # lifts (NQ, 1) terms to (NQ, 16)
        for a in range(N_ACTIONS):
            a1, a2, a3, a4 = (int(a == x) for x in range(4))
            r_s = a1 * ch_s * (1 - act) * i_se * i_s
            r_ps = a2 * ch_sp * (1 - act) * i_se * i_ps
            a_ps_in = a3 * ch_ps * i_p * i_pe * (1 - ch_p) * room
            r_se = a1 * i_s + a2 * i_ps + spread
            direct_ok = a4 + a3 if alt else a4
            r_p = i_pe * (direct_ok * ch_p + a3 * ch_ps * (1 - ch_p) * room)
            r_pe = i_p + spread

            pen = (act * (a1 + a2)
                   + a1 * (1 - ch_s * i_s * i_se)
                   + a2 * (1 - relay_ch * i_ps * i_se)
                   + a3 * full
                   + a3 * (ch_p * act + (1 - ch_ps * act)))
            rewards[:, :, a] = (rp.omega * r_s * i_s + (1.0 - rp.omega) * r_ps * i_ps
                                - rp.penalty_k * pen)

            served = (r_p, r_pe, r_s, r_ps, r_se)
            arrived = (arrivals[0], arrivals[1], arrivals[2], a_ps_in[:, :, None], arrivals[3])
            nxt = np.zeros((nq, 16, 16), dtype=np.int64)
            for i, q in enumerate((q_p, q_pe, q_s, q_ps, q_se)):
                level = np.maximum(q - served[i], 0)[:, :, None] + arrived[i]
                nxt = nxt * radix[i] + np.minimum(level, caps[i])
            succ[:, :, a, :] = nxt
        self.rewards = rewards
        self.successors = succ

    def expected_next_value(self, values: np.ndarray) -> np.ndarray:
        """E[V(next) | state, action] as an array of shape (NQ, 16 links, 16 chains, 4)."""
        v = values.reshape(self.n_queue_states, 16, 16)
        # mix over next link bits; w[q', link, chain'] with link the current link state
        w = np.einsum("cd,qdr->qcr", self.link_kernel, v)
        links = np.arange(16)[None, :, None, None]
        chains = np.arange(16)[None, None, None, :]
        g = w[self.successors, links, chains]  # (NQ, 16, 4, 16 next chains)
        return np.einsum("rk,qcak->qcra", self.chain_kernel, g)

    def q_values(self, values: np.ndarray) -> np.ndarray:
        """Bellman backup, shape (n_states, 4)."""
        e = self.expected_next_value(values)
        r = self.rewards[:, :, None, :]
        return (r + self.gamma * e).reshape(self.n_states, N_ACTIONS)

    def transition_row(self, state: int, action: int) -> tuple[np.ndarray, np.ndarray]:
        """Sparse next-state distribution of one (state, action): (indices, probabilities)."""
        rest, chain = divmod(int(state), 16)
        qidx, link = divmod(rest, 16)
        nq = self.successors[qidx, link, int(action)]  # per next chain bits
        idx = ((nq[:, None] * 16 + np.arange(16)[None, :]) * 16
               + np.arange(16)[:, None])
        prob = self.chain_kernel[chain][:, None] * self.link_kernel[link][None, :]
        uniq, inv = np.unique(idx.ravel(), return_inverse=True)
        return uniq, np.bincount(inv, weights=prob.ravel())

    def row_sum_errors(self, chunk: int = 4096) -> np.ndarray:
        """|1 - sum of assembled row| for every (state, action), shape (n_states, 4)."""
        out = np.empty((self.n_states, N_ACTIONS))
        chain_of = np.arange(self.n_states) % 16
        link_of = (np.arange(self.n_states) // 16) % 16
        for start in range(0, self.n_states, chunk):
            sl = slice(start, min(start + chunk, self.n_states))
            joint = (self.chain_kernel[chain_of[sl]][:, :, None]
                     * self.link_kernel[link_of[sl]][:, None, :])
            total = joint.sum(axis=(1, 2))
            out[sl] = np.abs(1.0 - total)[:, None]
        return out


@dataclass
class ValueIterationResult:
    values: np.ndarray
    policy: np.ndarray  # action per exact state
    sweeps: int
    last_change: float


def value_iteration(instance: OracleInstance, tol: float = 1e-9, *,
                    init: np.ndarray | float | None = None,
                    max_sweeps: int = 100_000) -> ValueIterationResult:
    """Iterate the Bellman optimality backup until the sup-norm change drops below ``tol``.

    On return the values are within ``tol * gamma / (1 - gamma)`` of optimal.
    Ties in the final greedy step go to the lowest action index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(instance.n_states) if init is None else np.broadcast_to(
        np.asarray(init, dtype=np.float64), (instance.n_states,)).copy()
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        q = instance.q_values(v)
        v_new = q.max(axis=1)
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol={tol} in {max_sweeps} sweeps")
    policy = np.argmax(instance.q_values(v), axis=1).astype(np.int64)
    return ValueIterationResult(v, policy, sweep, change)


def shrunk_instance(base: ModelParams, reward_params: RewardParams, *, capacity: int = 2,
                    lambda_p: float | None = None, gamma: float = 0.9,
                    max_states: int = 1_000_000) -> OracleInstance:
    params = base if lambda_p is None else base.with_lambda_p(lambda_p)
    params = replace(params, capacities=dict.fromkeys(QUEUES, capacity))
    return OracleInstance(params, reward_params, gamma, max_states)


@dataclass
class GapReport:
    oracle_reward: float
    learned_reward: float
    gap: float
    oracle_runs: list[MetricsRecord]
    learned_runs: list[MetricsRecord]


def oracle_gap(policy: Policy, instance: OracleInstance, scheme: LevelScheme, *,
               seeds: list[int], horizon: int,
               optimal: ValueIterationResult | None = None, tol: float = 1e-9,
               eps: float = 1e-12, full_state: bool = False) -> GapReport:
    """Relative long-run reward shortfall of ``policy`` against the exact optimum.

    Both policies run on the same seeds. The optimal one acts on the exact
    state; ``policy`` acts on the quantized observation unless ``full_state``.
    """
    if optimal is None:
        optimal = value_iteration(instance, tol)
    opt_runs = [simulate_policy(optimal.policy, instance.params, instance.reward_params,
                                scheme, horizon, s, full_state=True) for s in seeds]
    learned_runs = [simulate_policy(policy.actions, instance.params, instance.reward_params,
                                    scheme, horizon, s, full_state=full_state) for s in seeds]
    opt = float(np.mean([m.mean_reward for m in opt_runs]))
    learned = float(np.mean([m.mean_reward for m in learned_runs]))
    return GapReport(opt, learned, (opt - learned) / max(abs(opt), eps), opt_runs, learned_runs)
