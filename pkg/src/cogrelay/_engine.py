"""Compiled slot loop used for training and long evaluations.

Mirrors :func:`cogrelay.simcore.step`, :func:`cogrelay.rl.reward` and the
Q-learning update on flat integer arrays. Uniform draws are taken in blocks
from the same named substreams the reference engine uses, one column per
process, so both engines produce identical trajectories for a given seed.

State vector layout (int64[13])::

    0..4   queue lengths   p, pe, s, ps, se
    5..8   link bits       p, s, ps, sp
    9..12  arrival chains  p, pe, s, se
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .simcore import ARRIVAL_QUEUES, LINKS, QUEUES, ModelParams, NetworkState, QueueState
from .stochastic import RngStream

CHUNK = 1 << 16

# outcome vector layout (int64[16])
R_S, R_PS, A_PS_IN, R_SE, R_P, R_PE, ACT, DIRECT, RELAYED, COLLISION, WASTED = range(11)
DROPS = 11
N_OUT = 16

# metric accumulator layout (float64[21])
M_DIRECT, M_RELAYED, M_SECONDARY, M_WASTED, M_COLLISION, M_REWARD = range(6)
M_QLEN = 6  # 5 slots: mean queue lengths at slot start
M_DROPS = 11  # 5 slots
M_ACTIONS = 16  # 4 slots: action counts
M_SLOTS = 20
N_METRICS = 21

POLICY_OBSERVED = 0
POLICY_FULL_STATE = 1


def state_to_array(state: NetworkState) -> np.ndarray:
    return np.array(
        [state.queue(k).len for k in QUEUES]
        + [getattr(state, f"ch_{k}") for k in LINKS]
        + [getattr(state, f"arr_{k}") for k in ARRIVAL_QUEUES],
        dtype=np.int64,
    )


def array_to_state(arr: np.ndarray, caps: np.ndarray, slot: int) -> NetworkState:
    queues = [QueueState(int(arr[i]), int(caps[i])) for i in range(5)]
    return NetworkState(*queues, *(int(x) for x in arr[5:13]), slot)


def model_arrays(params: ModelParams) -> tuple:
    """(caps, lam, beta, gamma, q, alt_decode) in engine layout."""
    caps = np.array([int(params.capacities[k]) for k in QUEUES], dtype=np.int64)
    lam = np.array([params.arrivals[k].lam for k in ARRIVAL_QUEUES])
    beta = np.array([params.arrivals[k].beta for k in ARRIVAL_QUEUES])
    gam = np.array([params.channels[k].gamma for k in LINKS])
    qoff = np.array([params.channels[k].q for k in LINKS])
    return caps, lam, beta, gam, qoff, bool(params.primary_decodes_on_accept)


def draw_block(rng: RngStream, n: int) -> np.ndarray:
    """Environment draws for ``n`` slots: columns arrival p,pe,s,se then channel p,s,ps,sp."""
    cols = [rng.substream(f"arrival.{k}").uniforms(n) for k in ARRIVAL_QUEUES]
    cols += [rng.substream(f"channel.{k}").uniforms(n) for k in LINKS]
    return np.ascontiguousarray(np.stack(cols, axis=1))


@njit(cache=True, nogil=True)
def _level(length, thresholds):
    if length <= 0:
        return 0
    lvl = 1
    for th in thresholds:
        if length > th:
            lvl += 1
    return lvl


@njit(cache=True, nogil=True)
def observed_index(st, thresholds, n_levels):
    act = 1 if (st[0] > 0 and st[1] > 0) else 0
    l_ps = _level(st[3], thresholds)
    l_se = _level(st[4], thresholds)
    l_s = _level(st[2], thresholds)
    bits = act + 2 * st[8] + 4 * st[6] + 8 * st[5] + 16 * st[7]
    return bits + 32 * (l_ps + n_levels * (l_se + n_levels * l_s))


@njit(cache=True, nogil=True)
def full_index(st, caps):
    idx = 0
    for i in range(5):
        idx = idx * (caps[i] + 1) + st[i]
    ch = st[5] + 2 * st[6] + 4 * st[7] + 8 * st[8]
    ar = st[9] + 2 * st[10] + 4 * st[11] + 8 * st[12]
    return (idx * 16 + ch) * 16 + ar


@njit(cache=True, nogil=True)
def _slot(st, a, caps, lam, beta, gam, qoff, u, alt_decode, out):
    a1 = 1 if a == 0 else 0
    a2 = 1 if a == 1 else 0
    a3 = 1 if a == 2 else 0
    a4 = 1 if a == 3 else 0
    i_p = 1 if st[0] > 0 else 0
    i_pe = 1 if st[1] > 0 else 0
    i_s = 1 if st[2] > 0 else 0
    i_ps = 1 if st[3] > 0 else 0
    i_se = 1 if st[4] > 0 else 0
    ch_p, ch_s, ch_ps, ch_sp = st[5], st[6], st[7], st[8]
    act = i_p * i_pe
    room = 1 if st[3] < caps[3] else 0

    r_s = a1 * ch_s * (1 - act) * i_se * i_s
    r_ps = a2 * ch_sp * (1 - act) * i_se * i_ps
    a_ps_in = a3 * ch_ps * i_p * i_pe * (1 - ch_p) * room
    r_se = a1 * i_s + a2 * i_ps
    direct_ok = a4 + a3 if alt_decode else a4
    r_p = i_pe * (direct_ok * ch_p + a3 * ch_ps * (1 - ch_p) * room)
    r_pe = i_p

    out[R_S] = r_s
    out[R_PS] = r_ps
    out[A_PS_IN] = a_ps_in
    out[R_SE] = r_se
    out[R_P] = r_p
    out[R_PE] = r_pe
    out[ACT] = act
    out[DIRECT] = direct_ok * ch_p * act
    out[RELAYED] = r_ps
    out[COLLISION] = act * (a1 + a2)
    out[WASTED] = i_se * r_se * (1 - r_s - r_ps)

    # draw columns: 0..3 arrival chains, 4..7 links
    for j in range(4):
        stay_empty = lam[j] if st[9 + j] == 0 else beta[j]
        st[9 + j] = 0 if u[j] < stay_empty else 1
    served = (r_p, r_pe, r_s, r_ps, r_se)
    arrived = (st[9], st[10], st[11], a_ps_in, st[12])
    for i in range(5):
        level = st[i] - served[i]
        if level < 0:
            level = 0
        level += arrived[i]
        drop = level - caps[i]
        if drop > 0:
            level = caps[i]
        else:
            drop = 0
        st[i] = level
        out[DROPS + i] = drop

    for j in range(4):
        uj = u[4 + j]
        if st[5 + j] == 0:
            st[5 + j] = 1 if uj < gam[j] else 0
        else:
            st[5 + j] = 0 if uj < qoff[j] else 1


@njit(cache=True, nogil=True)
def _reward(pre, a, r_s, r_ps, caps, omega, k_pen, literal_relay_penalty):
    a1 = 1 if a == 0 else 0
    a2 = 1 if a == 1 else 0
    a3 = 1 if a == 2 else 0
    i_s = 1 if pre[2] > 0 else 0
    i_ps = 1 if pre[3] > 0 else 0
    i_se = 1 if pre[4] > 0 else 0
    act = 1 if (pre[0] > 0 and pre[1] > 0) else 0
    ch_p, ch_s, ch_ps, ch_sp = pre[5], pre[6], pre[7], pre[8]
    full = 1 if pre[3] >= caps[3] else 0
    relay_ch = ch_ps if literal_relay_penalty else ch_sp
    pen = (act * (a1 + a2)
           + a1 * (1 - ch_s * i_s * i_se)
           + a2 * (1 - relay_ch * i_ps * i_se)
           + a3 * full
           + a3 * (ch_p * act + (1 - ch_ps * act)))
    return omega * r_s * i_s + (1.0 - omega) * r_ps * i_ps - k_pen * pen


@njit(cache=True, nogil=True)
def train_chunk(st, q, visits, t0, explore_until, mu, alpha, disc,
                env_u, agent_u, mask, caps, lam, beta, gam, qoff, alt_decode,
                thresholds, n_levels, omega, k_pen, literal_relay_penalty,
                rewards_out, metrics):
    n = env_u.shape[0]
    out = np.zeros(N_OUT, dtype=np.int64)
    pre = np.empty(13, dtype=np.int64)
    ties = np.empty(4, dtype=np.int64)
    n_mask = mask.shape[0]
    for i in range(n):
        t = t0 + i
        s = observed_index(st, thresholds, n_levels)
        u_explore = agent_u[i, 0]
        u_choice = agent_u[i, 1]
        if t < explore_until and u_explore < mu:
            a = mask[int(u_choice * n_mask)]
        else:
            best = q[s, mask[0]]
            for m in range(1, n_mask):
                if q[s, mask[m]] > best:
                    best = q[s, mask[m]]
            n_ties = 0
            for m in range(n_mask):
                if q[s, mask[m]] == best:
                    ties[n_ties] = mask[m]
                    n_ties += 1
            a = ties[int(u_choice * n_ties)]
        for j in range(13):
            pre[j] = st[j]
        _slot(st, a, caps, lam, beta, gam, qoff, env_u[i], alt_decode, out)
        r = _reward(pre, a, out[R_S], out[R_PS], caps, omega, k_pen, literal_relay_penalty)
        s2 = observed_index(st, thresholds, n_levels)
        nxt = q[s2, mask[0]]
        for m in range(1, n_mask):
            if q[s2, mask[m]] > nxt:
                nxt = q[s2, mask[m]]
        q[s, a] += alpha * (r + disc * nxt - q[s, a])
        visits[s, a] += 1
        rewards_out[i] = r
        _accumulate(metrics, pre, a, out, r)


@njit(cache=True, nogil=True)
def _accumulate(metrics, pre, a, out, r):
    metrics[M_DIRECT] += out[DIRECT]
    metrics[M_RELAYED] += out[RELAYED]
    metrics[M_SECONDARY] += out[R_S]
    metrics[M_WASTED] += out[WASTED]
    metrics[M_COLLISION] += out[COLLISION]
    metrics[M_REWARD] += r
    for j in range(5):
        metrics[M_QLEN + j] += pre[j]
        metrics[M_DROPS + j] += out[DROPS + j]
    metrics[M_ACTIONS + a] += 1
    metrics[M_SLOTS] += 1


@njit(cache=True, nogil=True)
def evaluate_chunk(st, policy, policy_kind, env_u, caps, lam, beta, gam, qoff,
                   alt_decode, thresholds, n_levels, omega, k_pen,
                   literal_relay_penalty, metrics):
    n = env_u.shape[0]
    out = np.zeros(N_OUT, dtype=np.int64)
    pre = np.empty(13, dtype=np.int64)
    for i in range(n):
        if policy_kind == POLICY_OBSERVED:
            a = policy[observed_index(st, thresholds, n_levels)]
        else:
            a = policy[full_index(st, caps)]
        for j in range(13):
            pre[j] = st[j]
        _slot(st, a, caps, lam, beta, gam, qoff, env_u[i], alt_decode, out)
        r = _reward(pre, a, out[R_S], out[R_PS], caps, omega, k_pen, literal_relay_penalty)
        _accumulate(metrics, pre, a, out, r)


@njit(cache=True, nogil=True)
def trace_chunk(st, actions, env_u, caps, lam, beta, gam, qoff, alt_decode,
                omega, k_pen, literal_relay_penalty, pre_out, out_out, rewards_out):
    """Replay a fixed action sequence, recording every slot for offline checks."""
    out = np.zeros(N_OUT, dtype=np.int64)
    for i in range(actions.shape[0]):
        for j in range(13):
            pre_out[i, j] = st[j]
        a = actions[i]
        _slot(st, a, caps, lam, beta, gam, qoff, env_u[i], alt_decode, out)
        rewards_out[i] = _reward(pre_out[i], a, out[R_S], out[R_PS], caps, omega, k_pen,
                                 literal_relay_penalty)
        for j in range(N_OUT):
            out_out[i, j] = out[j]
