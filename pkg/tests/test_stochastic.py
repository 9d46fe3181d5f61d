from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogrelay.stochastic import (
    ChannelParams,
    DegenerateChainError,
    MmbpParams,
    RngStream,
    channel_stationary_on_prob,
    channel_step,
    mmbp_stationary_arrival_prob,
    mmbp_step,
)


class FixedDraw:
    """Stands in for an RngStream and returns a preset uniform."""

    def __init__(self, *values):
        self.values = list(values)

    def uniform(self):
        return self.values.pop(0)


def test_mmbp_absorbing_no_arrival_state():
    rng = RngStream(3)
    for _ in range(200):
        assert mmbp_step(0, MmbpParams(1.0, 0.3), rng) == (0, 0)


def test_mmbp_forced_leave_arrival_state():
    rng = RngStream(4)
    for _ in range(200):
        assert mmbp_step(1, MmbpParams(0.2, 1.0), rng) == (0, 0)


@pytest.mark.parametrize("u, expected", [(0.39, 0), (0.41, 1)])
def test_mmbp_inverse_cdf(u, expected):
    assert mmbp_step(0, MmbpParams(0.4, 0.9), FixedDraw(u)) == (expected, expected)


def test_mmbp_from_arrival_state_uses_beta():
    p = MmbpParams(0.9, 0.3)
    assert mmbp_step(1, p, FixedDraw(0.29))[0] == 0
    assert mmbp_step(1, p, FixedDraw(0.31))[0] == 1


def test_mmbp_stationary_values():
    assert mmbp_stationary_arrival_prob(MmbpParams(1.0, 0.5)) == 0.0
    assert mmbp_stationary_arrival_prob(MmbpParams(0.4, 0.4)) == pytest.approx(0.6)


@given(st.floats(0.0, 0.99))
def test_mmbp_symmetric_sweep_gives_one_minus_lambda(x):
    assert mmbp_stationary_arrival_prob(MmbpParams(x, x)) == pytest.approx(1 - x)


def test_mmbp_stationary_solves_balance_equations():
    # pi_1 * beta = pi_0 * (1 - lambda), solved with exact rationals
    lam, beta = Fraction(8, 10), Fraction(4, 10)
    pi1 = (1 - lam) / ((1 - lam) + beta)
    assert pi1 * beta == (1 - pi1) * (1 - lam)
    assert mmbp_stationary_arrival_prob(MmbpParams(0.8, 0.4)) == pytest.approx(float(pi1))


def test_mmbp_degenerate_chain_rejected():
    with pytest.raises(DegenerateChainError):
        mmbp_stationary_arrival_prob(MmbpParams(1.0, 0.0))


def test_channel_steps():
    rng = RngStream(5)
    assert all(channel_step(0, ChannelParams(1.0, 0.5), rng) == 1 for _ in range(100))
    assert all(channel_step(1, ChannelParams(0.3, 0.0), rng) == 1 for _ in range(100))
    assert channel_step(0, ChannelParams(0.2, 0.5), FixedDraw(0.19)) == 1
    assert channel_step(0, ChannelParams(0.2, 0.5), FixedDraw(0.21)) == 0
    assert channel_step(1, ChannelParams(0.2, 0.5), FixedDraw(0.49)) == 0


@pytest.mark.parametrize("gamma, q, expected", [
    (0.2, 0.4, Fraction(1, 3)),
    (0.5, 0.0, Fraction(1)),
    (0.8, 0.05, Fraction(16, 17)),
])
def test_channel_stationary(gamma, q, expected):
    assert channel_stationary_on_prob(ChannelParams(gamma, q)) == pytest.approx(float(expected))


def test_channel_degenerate_rejected():
    with pytest.raises(DegenerateChainError):
        channel_stationary_on_prob(ChannelParams(0.0, 0.0))


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_params_reject_non_probabilities(bad):
    with pytest.raises(ValueError):
        MmbpParams(bad, 0.5)
    with pytest.raises(ValueError):
        ChannelParams(0.5, bad)


def test_stream_replay_is_bit_exact():
    a, b = RngStream(123), RngStream(123)
    assert [a.uniform() for _ in range(50)] == [b.uniform() for _ in range(50)]


def test_block_draws_match_scalar_draws():
    a, b = RngStream(9).substream("x"), RngStream(9).substream("x")
    scalar = np.array([a.uniform() for _ in range(300)])
    block = np.concatenate([b.uniforms(100), b.uniforms(200)])
    assert np.array_equal(scalar, block)


def test_substreams_are_memoized_and_distinct():
    root = RngStream(1)
    assert root.substream("a") is root.substream("a")
    assert root.substream("a").uniform() != root.substream("b").uniform()


def test_substream_unaffected_by_unrelated_streams():
    plain = RngStream(77)
    busy = RngStream(77)
    busy.substream("noise").uniforms(1000)
    busy.substream("other")
    busy.uniform()
    assert np.array_equal(plain.substream("arrival.p").uniforms(64),
                          busy.substream("arrival.p").uniforms(64))


def test_seed_range_checked():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)


def _run_chain(step, state, params, n, seed):
    rng = RngStream(seed).substream("chain")
    ones = 0
    for _ in range(n):
        state = step(state, params, rng)
        ones += state
    return ones / n


@pytest.mark.slow
@settings(max_examples=4, deadline=None, derandomize=True)
@given(lam=st.floats(0.0, 1.0), beta=st.floats(0.0, 1.0))
def test_mmbp_empirical_frequency_matches_closed_form(lam, beta):
    if (1 - lam) + beta < 0.1:
        return
    p = MmbpParams(lam, beta)
    freq = _run_chain(lambda s, pr, r: mmbp_step(s, pr, r)[0], 0, p, 10**6, seed=2024)
    assert abs(freq - mmbp_stationary_arrival_prob(p)) <= 0.005


@pytest.mark.slow
@settings(max_examples=4, deadline=None, derandomize=True)
@given(gamma=st.floats(0.0, 1.0), q=st.floats(0.0, 1.0))
def test_channel_empirical_frequency_matches_closed_form(gamma, q):
    if gamma + q < 0.1:
        return
    p = ChannelParams(gamma, q)
    freq = _run_chain(channel_step, 1, p, 10**6, seed=2025)
    assert abs(freq - channel_stationary_on_prob(p)) <= 0.005
