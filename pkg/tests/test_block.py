import math

import numpy as np
import pytest

import oracles
from ffrelay.arma import ArmaProcess
from ffrelay.block import (BlockProgram, certify, random_two_tap_search, sample_two_taps, solve_block,
                           two_tap_region)
from ffrelay.bounds import p2p_rate
from ffrelay.errors import Infeasible

WHITE = ArmaProcess.white(1.0)


def _prog(taps, gamma, N=8, rho=1.0, sw2=0.1, normalization="message"):
    return BlockProgram.for_taps(taps, ArmaProcess.white(sw2), WHITE, N, rho, gamma, normalization)


@pytest.mark.parametrize("taps, gamma", [((1.0, 0.0), 1.1), ((0.5, -0.3), 1.8), ((0.8,), 0.9)])
def test_block_matches_cvxpy(taps, gamma):
    prog = _prog(taps, gamma)
    sol = solve_block(prog)
    ref = oracles.cvx_block_rate(taps, gamma, 8, 1.0, 0.1, prog.D)
    assert math.isclose(sol.rate_nats, ref, abs_tol=2e-6)


def test_block_block_normalization_matches_cvxpy():
    prog = _prog((0.7,), 1.3, normalization="block")
    assert prog.D == 9
    sol = solve_block(prog)
    assert math.isclose(sol.rate_nats, oracles.cvx_block_rate((0.7,), 1.3, 8, 1.0, 0.1, 9), abs_tol=2e-6)


def test_relay_off_is_point_to_point():
    for rho in (0.5, 1.0, 3.0):
        sol = solve_block(_prog((0.0,), 0.0, N=10, rho=rho))
        assert math.isclose(sol.rate_nats, p2p_rate(rho), abs_tol=1e-6)


def test_certificate():
    prog = _prog((1.0, 0.0), 1.1)
    sol = solve_block(prog)
    cert = certify(prog, sol)
    assert cert["strictly_lower"]
    assert cert["schur_min_eig"] >= -1e-8
    assert cert["source_power"] <= cert["source_budget"] * (1 + 1e-7)
    assert cert["relay_power"] <= cert["relay_budget"] * (1 + 1e-7)
    assert math.isclose(cert["rate"], sol.rate_nats, abs_tol=1e-10)
    assert sol.kkt_residual < 1e-6


def test_scale_invariance():
    base = _prog((0.6,), 1.2)
    c = 3.7
    scaled = BlockProgram(base.Kz_eff * c, base.H, base.Kw * c, base.rho * c, base.gamma, base.N, base.L)
    assert math.isclose(solve_block(base).rate_nats, solve_block(scaled).rate_nats, abs_tol=1e-6)


def test_rate_grows_with_relay_budget():
    # tap 0.8 needs about 0.70 relay power without feedback, so these budgets bind
    rates = [solve_block(_prog((0.8,), g)).rate_nats for g in (0.5, 0.6, 0.7)]
    assert rates[0] < rates[1] < rates[2]


def test_program_validation():
    with pytest.raises(ValueError):
        _prog((0.5,), 1.0, normalization="other")
    with pytest.raises(ValueError):
        _prog((0.5,), 1.0, N=65)
    p = _prog((0.5,), 1.0)
    with pytest.raises(Infeasible):
        BlockProgram(-p.Kz_eff, p.H, p.Kw, 1.0, 1.0, p.N, p.L)


def test_two_tap_sampling_stays_in_region():
    pts = sample_two_taps(1.0, 1.3, 0.1, 500, 3)
    assert pts.shape == (500, 2)
    assert np.all(two_tap_region(1.0, 1.3, 0.1, pts[:, 0], pts[:, 1]))
    assert np.array_equal(pts, sample_two_taps(1.0, 1.3, 0.1, 500, 3))


def test_random_search_keeps_best():
    taps, sol, log = random_two_tap_search(1.0, 1.3, 0.1, 8, 6, seed=1, include_origin=True)
    assert len(log) == 7
    rates = [r for _, _, r in log if not math.isnan(r)]
    assert math.isclose(sol.rate_nats, max(rates))
    assert rates[0] == pytest.approx(p2p_rate(1.0), abs=1e-6)


def test_white_noise_needs_no_feedback():
    N = 10
    prog = BlockProgram(np.eye(N), np.eye(N), np.zeros((N, N)), 1.0, 0.0, N, 0)
    sol = solve_block(prog)
    assert np.max(np.abs(sol.B)) <= 1e-6
    assert math.isclose(sol.rate_nats, p2p_rate(1.0), abs_tol=1e-6)


def test_block_approaches_stationary_rate():
    from ffrelay.bounds import best_rate_for_taps

    w = ArmaProcess.white(0.1)
    stationary = best_rate_for_taps([0.7], w, WHITE, 1.0, 1.1).rate_nats
    rates = [solve_block(BlockProgram.for_taps([0.7], w, WHITE, N, 1.0, 1.1)).rate_nats for N in (10, 20, 40, 64)]
    assert abs(rates[1] - stationary) <= 0.02
    gaps = [abs(r - stationary) for r in rates]
    assert all(b <= a + 5e-3 for a, b in zip(gaps, gaps[1:]))
