import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpfpl.numeric import RngStream
from dpfpl.privacy import (
    BudgetExhausted,
    NoiseScales,
    PrivacySpec,
    account,
    calibrate_sigma,
    clip,
    clip_per_example,
    clipped_mean,
    epsilon_for_sigma,
    parallel_compose,
    privatize,
)

eps_st = st.floats(1e-3, 10.0)
delta_st = st.floats(1e-9, 0.5)


def spec(**kw):
    base = dict(epsilon=0.1, delta=1e-5, clip_threshold=10.0, rounds=100, batch_size=32, num_clients=4)
    base.update(kw)
    return PrivacySpec(**base)


@given(st.floats(1e-3, 1e3), eps_st, delta_st, st.integers(1, 10_000))
def test_sigma_closed_form(s, eps, delta, t):
    expected = s * math.sqrt(t) * math.sqrt(2 * math.log(1.25 / delta)) / eps
    assert calibrate_sigma(s, eps, delta, t) == pytest.approx(expected, rel=1e-12)
    assert epsilon_for_sigma(calibrate_sigma(s, eps, delta, t), s, delta, t) == pytest.approx(eps, rel=1e-12)


@given(eps_st, st.integers(1, 64))
def test_sigma_monotone(eps, n):
    assert calibrate_sigma(1.0, eps, 1e-5, n) > calibrate_sigma(1.0, 2 * eps, 1e-5, n)
    assert calibrate_sigma(1.0, eps, 1e-5, n + 1) > calibrate_sigma(1.0, eps, 1e-5, n)


@pytest.mark.parametrize("args", [(0, 1, 1e-5, 1), (1, 0, 1e-5, 1), (1, 1, 0, 1), (1, 1, 1, 1), (1, 1, 1e-5, 0)])
def test_sigma_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        calibrate_sigma(*args)


@given(st.integers(1, 50), st.integers(1, 256))
def test_global_sigma_is_local_over_n(n, batch):
    sp = spec(num_clients=n, batch_size=batch)
    assert sp.local_sensitivity == pytest.approx(10.0 / batch)
    assert sp.global_sensitivity == pytest.approx(10.0 / (n * batch))
    sc = NoiseScales.from_spec(sp)
    assert sc.sigma_global == pytest.approx(sc.sigma_local / n, rel=1e-12)


@pytest.mark.parametrize("field,value", [("epsilon", 0), ("delta", 1.0), ("clip_threshold", -1), ("rounds", 0),
                                         ("batch_size", 0), ("num_clients", 0)])
def test_spec_validation(field, value):
    with pytest.raises(ValueError):
        spec(**{field: value})


def test_account_is_exact_at_horizon():
    sp = spec(epsilon=0.37, rounds=200)
    rep = account(sp, 200)
    assert rep.epsilon_spent_local == 0.37 and rep.epsilon_spent_global == 0.37


@given(st.integers(1, 300))
def test_account_monotone(t_max):
    sp = spec(rounds=t_max)
    spent = [account(sp, t).epsilon_spent_local for t in range(t_max + 1)]
    assert spent[0] == 0.0 and all(a <= b for a, b in zip(spent, spent[1:]))


def test_account_past_horizon():
    with pytest.raises(BudgetExhausted):
        account(spec(rounds=5), 6)
    with pytest.raises(ValueError):
        account(spec(rounds=5), -1)


def test_parallel_composition_is_max():
    assert parallel_compose([0.1, 0.4, 0.2]) == 0.4
    assert parallel_compose([]) == 0.0
    rep = account(spec(num_clients=7), 100)
    assert rep.epsilon_spent_local == 0.1


def test_budget_report_dict():
    d = account(spec(), 10).to_dict()
    assert set(d) == {"epsilon_spent_local", "epsilon_spent_global", "delta", "rounds_elapsed",
                      "sigma_local", "sigma_global"}


grads = arrays(float, st.tuples(st.integers(1, 8), st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-1e4, 1e4, allow_nan=False))


@given(grads, st.floats(1e-3, 1e3))
def test_clip_per_example_bounds_norm(g, c):
    out = clip_per_example(g, c)
    norms = np.linalg.norm(out.reshape(len(out), -1), axis=1)
    assert np.all(norms <= c * (1 + 1e-12))
    orig = np.linalg.norm(g.reshape(len(g), -1), axis=1)
    small = orig <= c
    np.testing.assert_array_equal(out[small], g[small])


@given(arrays(float, (3, 4), elements=st.floats(-1e4, 1e4, allow_nan=False)), st.floats(1e-3, 1e3))
def test_clip_keeps_direction(g, c):
    out = clip(g, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    if np.linalg.norm(g) > c:
        np.testing.assert_allclose(out * np.linalg.norm(g) / c, g, rtol=1e-9, atol=1e-9)


def test_clip_bad_threshold():
    with pytest.raises(ValueError):
        clip(np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        clip_per_example(np.ones((1, 2, 2)), -1.0)


def test_clipped_mean_fixed_denominator():
    g = np.ones((3, 2, 2))
    np.testing.assert_allclose(clipped_mean(g, 10.0, denominator=4), np.full((2, 2), 0.75))
    with pytest.raises(ValueError):
        clipped_mean(np.ones((0, 2, 2)), 1.0)


@given(st.integers(0, 2**31 - 1))
def test_add_remove_sensitivity(seed):
    rng = RngStream(seed)
    batch, c = 32, 10.0
    g = rng.normal((batch + 1, 3, 5), scale=50.0)
    a = clipped_mean(g[:batch], c, batch)
    b = clipped_mean(g, c, batch)
    assert np.linalg.norm(a - b) <= c / batch + 1e-9


def test_privatize_zero_sigma_is_identity():
    g = np.ones((2, 3))
    np.testing.assert_array_equal(privatize(g, 0.0, RngStream(0)), g)


def test_privatize_noise_statistics():
    sigma = 3.0
    noise = privatize(np.zeros((300, 400)), sigma, RngStream(21)).ravel()
    assert abs(noise.std(ddof=1) / sigma - 1) < 0.01
    assert abs(noise.mean()) < 3 * sigma / np.sqrt(noise.size)
