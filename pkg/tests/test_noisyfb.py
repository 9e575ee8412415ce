import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

import oracles
from ffrelay.noisyfb import (INF, NoisyFbProblem, closed_form, grid_oracle, peak_gain_pct, post_snr,
                             snr_formula, solve, sweep_h1)

pos = st.floats(0.05, 5.0)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), pos, pos, pos)
@settings(max_examples=200, deadline=None)
def test_three_snr_expressions_agree(g1, g2, f, h, rho, sw, sn):
    p = NoisyFbProblem(rho, sw, sn, 1.0)
    ref = oracles.noisy_fb_snr(g1, g2, f, h, rho, sw, sn)
    assert math.isclose(post_snr((g1, g2, f, h), p), ref, rel_tol=1e-9, abs_tol=1e-12)
    assert math.isclose(float(snr_formula(g1, g2, f, h, p)), ref, rel_tol=1e-12, abs_tol=1e-12)


@pytest.mark.parametrize("kw", [dict(rho=0.0), dict(rho=INF), dict(sigma_w2=-1.0), dict(sigma_n2=math.nan),
                                dict(gamma=INF)])
def test_problem_validation(kw):
    args = dict(rho=1.0, sigma_w2=1.0, sigma_n2=0.1, gamma=1.0)
    args.update(kw)
    with pytest.raises(ValueError):
        NoisyFbProblem(**args)


def _slsqp_best(p, starts=40, seed=0):
    rng = np.random.default_rng(seed)
    rho, hb = p.rho, p.h_max
    cons = [{"type": "ineq", "fun": lambda x: rho - x[0] ** 2},
            {"type": "ineq", "fun": lambda x: rho - x[1] ** 2 - (1 + p.sigma_n2) * x[2] ** 2}]
    bounds = [(-math.sqrt(rho), math.sqrt(rho)), (-math.sqrt(rho), math.sqrt(rho)),
              (-math.sqrt(rho), math.sqrt(rho)), (-hb, hb)]
    best = -np.inf
    for _ in range(starts):
        x0 = [rng.uniform(lo, hi) for lo, hi in bounds]
        res = optimize.minimize(lambda x: -oracles.noisy_fb_snr(*x, rho, p.sigma_w2, p.sigma_n2), x0,
                                method="SLSQP", bounds=bounds, constraints=cons,
                                options={"ftol": 1e-12, "maxiter": 500})
        if res.success and all(c["fun"](res.x) >= -1e-9 for c in cons):
            best = max(best, -res.fun)
    return best


@pytest.mark.filterwarnings("ignore:Values in x were outside bounds")
@pytest.mark.parametrize("rho, sw, sn, gamma", [(1, 1, 0.1, 1), (2, 0.5, 0.3, 3), (0.5, 2, 1.0, 0.5),
                                                (1, 0.2, 0.05, 4), (3, 1, 2.0, 1)])
def test_solve_beats_local_search(rho, sw, sn, gamma):
    p = NoisyFbProblem(rho, sw, sn, gamma)
    sol = solve(p)
    ref = _slsqp_best(p)
    assert sol.snr >= ref - 1e-7
    assert sol.snr <= ref + 1e-6
    assert math.isclose(sol.snr, post_snr((sol.g1, sol.g2, sol.f21, sol.h1), p), rel_tol=1e-12)
    assert sol.g2 ** 2 + (1 + sn) * sol.f21 ** 2 <= rho * (1 + 1e-9)
    assert abs(sol.h1) <= p.h_max * (1 + 1e-12)


def test_feedback_never_hurts():
    for sn in (0.0, 0.1, 1.0, 10.0, INF):
        p = NoisyFbProblem(1.0, 1.0, sn, 1.0)
        assert solve(p).snr >= solve(NoisyFbProblem(1.0, 1.0, INF, 1.0)).snr - 1e-12


def test_relay_off_two_use_scheme():
    # noiseless feedback with no relay gives (1 + rho)^2 - 1
    sol = solve(NoisyFbProblem(1.0, INF, 0.0, 1.0))
    assert math.isclose(sol.snr, 3.0, rel_tol=1e-12)
    assert sol.h1 == 0.0


def test_sweep_bounds_checked():
    p = NoisyFbProblem(1.0, 1.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        sweep_h1(p, [p.h_max * 1.01])
    pts = sweep_h1(p, np.linspace(0, p.h_max, 11))
    assert pts[-1].branch == "boundary" and pts[0].branch == "interior"


def test_sweep_maximum_matches_solve():
    p = NoisyFbProblem(1.0, 1.0, 0.1, 4.0)
    grid = np.linspace(0, p.h_max, 4001)
    best = max(pt.snr for pt in sweep_h1(p, grid))
    assert math.isclose(best, solve(p).snr, abs_tol=1e-5)


def test_noiseless_feedback_peak_gain():
    p = NoisyFbProblem(1.0, 1.0, 0.0, 4.0)
    assert math.isclose(peak_gain_pct(p, np.linspace(0, p.h_max, 2001)), 100.0 / 3.0, abs_tol=1e-3)


def test_grid_oracle_reports_positive_g1():
    sol = grid_oracle(NoisyFbProblem(1.0, 1.0, 0.5, 1.0), 1e-2)
    assert sol.g1 > 0 and sol.method == "grid_oracle"


def test_closed_form_absent_in_general_case():
    assert closed_form(NoisyFbProblem(1.0, 1.0, 0.5, 1.0)) is None
