import math

import numpy as np
import pytest

from ffrelay.arma import ArmaProcess, compose_effective_noise, to_state_space
from ffrelay.bounds import best_rate_for_model, pad_model
from ffrelay.coding import (ClosedLoopRun, empirical_rate, error_collapse_study, pam_points, pam_spacing,
                            run_closed_loop, sk_snr, symbol_errors)
from ffrelay.errors import PowerViolation


def _white(rho=1.0):
    model = pad_model(to_state_space(ArmaProcess.white(1.0)))
    _, s, _ = best_rate_for_model(model, rho)
    return model, s


@pytest.mark.parametrize("M", [2, 4, 7, 16])
def test_pam_unit_energy(M):
    pts = pam_points(M)
    assert math.isclose(np.mean(pts ** 2), 1.0, rel_tol=1e-12)
    assert np.allclose(np.diff(pts), pam_spacing(M))


def test_symbol_errors_edge_symbols_one_sided():
    M = 4
    half = pam_spacing(M) / 2
    err = np.array([2 * half, -2 * half, 2 * half, 0.1 * half])
    sym = np.array([0, 0, 3, 1])
    # symbol 0 only errs when the estimate moves up past the midpoint
    assert symbol_errors(err, sym, M).tolist() == [True, False, False, False]


def test_empirical_rate_from_known_errors():
    err = np.full(1000, 0.01)
    r = empirical_rate(err, 10)
    M = math.floor(math.sqrt(12.0 / (0.02 * (1 + 1e-12)) ** 2 + 1.0))
    assert math.isclose(r, math.log(M) / 10)
    assert empirical_rate(np.full(1000, 10.0), 10) == 0.0


def test_sk_recursion_closed_form():
    for rho in (0.3, 1.0, 4.0):
        for N in (1, 5, 12):
            assert math.isclose(sk_snr(rho, N), (1 + rho) ** N - 1, rel_tol=1e-12)


def test_expected_trajectory_matches_sk():
    model, s = _white()
    out = run_closed_loop(ClosedLoopRun(model, s, 0, 8, 2000, 1))
    assert np.allclose(out["expected_snr_trajectory"], [sk_snr(1.0, k) for k in range(1, 9)], rtol=1e-9)


def test_runs_are_reproducible_and_parallel_safe():
    model, s = _white()
    a = run_closed_loop(ClosedLoopRun(model, s, 4, 6, 9000, 5))
    b = run_closed_loop(ClosedLoopRun(model, s, 4, 6, 9000, 5))
    c = run_closed_loop(ClosedLoopRun(model, s, 4, 6, 9000, 5, workers=2))
    assert np.array_equal(a["empirical_snr_trajectory"], b["empirical_snr_trajectory"])
    assert np.allclose(a["empirical_snr_trajectory"], c["empirical_snr_trajectory"], rtol=1e-12)
    assert a["symbol_error_rate"] == c["symbol_error_rate"]


def test_power_budget_enforced():
    model, s = _white(rho=1.0)
    out = run_closed_loop(ClosedLoopRun(model, s, 2, 6, 20000, 2, rho=1.0))
    assert out["average_power"] == pytest.approx(1.0, rel=0.03)
    with pytest.raises(PowerViolation):
        run_closed_loop(ClosedLoopRun(model, s, 2, 6, 20000, 2, rho=0.5))


def test_colored_noise_power_settles_to_budget():
    zt = compose_effective_noise(ArmaProcess.white(0.1), ArmaProcess.white(1.0), [0.7])
    model = pad_model(to_state_space(zt.canonical()))
    _, s, _ = best_rate_for_model(model, 1.0)
    out = run_closed_loop(ClosedLoopRun(model, s, 2, 40, 20000, 3))
    assert out["power_per_use"][-10:].mean() == pytest.approx(1.0, rel=0.05)


def test_blocklength_guard():
    model, s = _white(rho=1e6)
    with pytest.raises(ValueError):
        run_closed_loop(ClosedLoopRun(model, s, 2, 200, 10, 0))


def test_collapse_study_validates_fraction():
    model, s = _white()
    with pytest.raises(ValueError):
        error_collapse_study(model, s, 1.0, [10], 100, 0)


def test_two_unstable_modes_each_carry_a_coordinate():
    # AR(2) noise with poles at +-1/sqrt(2) closes into two unstable modes of equal modulus
    from ffrelay.bounds import series_bound, series_model

    res = series_bound([0.5, 0.5], [1.0, 1.0], [1.0, 1.0], 1.0)
    model = to_state_space(series_model([0.5, 0.5], [1.0, 1.0]))
    out = run_closed_loop(ClosedLoopRun(model, res.s, 2 ** 12, 30, 20000, 3))
    assert out["message_coordinates"] == 2
    assert out["constellation"] == [64, 64]
    ratio = out["empirical_snr_trajectory"][1:] / out["expected_snr_trajectory"][1:]
    assert np.all(np.abs(ratio - 1) < 0.03)
    assert out["power_per_use"][-10:].mean() == pytest.approx(1.0, rel=0.05)


def test_blocklength_shorter_than_message_dimension():
    from ffrelay.bounds import series_bound, series_model

    res = series_bound([0.5, 0.5], [1.0, 1.0], [1.0, 1.0], 1.0)
    model = to_state_space(series_model([0.5, 0.5], [1.0, 1.0]))
    with pytest.raises(ValueError):
        run_closed_loop(ClosedLoopRun(model, res.s, 2, 1, 10, 0))
