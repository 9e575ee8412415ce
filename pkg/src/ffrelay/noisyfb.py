"""Two-use linear coding over a relay channel with noisy output feedback.

Use 1 sends x1 = g1 theta.  Use 2 sends x2 = g2 theta + f21 (z1 + n1) while
the relay forwards h1 (x1 + w1).  The destination combines both outputs with
the optimal linear estimator; the figure of merit is its post-processed SNR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import IterationDiverged

INF = math.inf


@dataclass(frozen=True)
class NoisyFbProblem:
    rho: float
    sigma_w2: float
    sigma_n2: float
    gamma: float

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ValueError("rho must be positive and finite")
        for name in ("sigma_w2", "sigma_n2", "gamma"):
            v = getattr(self, name)
            if math.isnan(v) or v < 0:
                raise ValueError(f"{name} must be non-negative")
        if math.isinf(self.gamma):
            raise ValueError("gamma must be finite")

    @property
    def h_max(self) -> float:
        """Relay gain limit sqrt(gamma rho / (rho + sigma_w2))."""
        if math.isinf(self.sigma_w2):
            return 0.0
        return math.sqrt(self.gamma * self.rho / (self.rho + self.sigma_w2))


@dataclass
class NoisyFbSolution:
    g1: float
    g2: float
    f21: float
    h1: float
    snr: float
    mu2: float
    mu3: float
    relay_power_saturated: bool
    method: str
    branch: str = ""
    kkt_residual: float = 0.0


def _mul(var: float, x: float) -> float:
    """var * x with inf * 0 read as 0 (a switched-off path carries no noise)."""
    return 0.0 if x == 0 else var * x


def _den(f21, h1, p: NoisyFbProblem) -> float:
    return 1.0 + _mul(p.sigma_n2, f21 * f21) + _mul(p.sigma_w2, h1 * h1)


def post_snr(params, problem: NoisyFbProblem) -> float:
    """g^T C^-1 g from the two-use system matrices."""
    g1, g2, f21, h1 = (float(v) for v in params)
    g = np.array([g1, g2 + h1 * g1])
    F = np.array([[0.0, 0.0], [f21, 0.0]])
    Bm = np.array([[0.0, 0.0], [h1, 0.0]])
    I = np.eye(2)
    C = (I + F) @ (I + F).T
    if f21:
        C = C + problem.sigma_n2 * F @ F.T
    if h1:
        C = C + problem.sigma_w2 * Bm @ Bm.T
    return float(g @ np.linalg.solve(C, g))


def snr_formula(g1, g2, f21, h1, problem: NoisyFbProblem):
    """Simplified form g1^2 + (g1 (h1 - f21) + g2)^2 / (1 + sn f21^2 + sw h1^2)."""
    num = (g1 * (h1 - f21) + g2) ** 2
    den = 1.0 + _arr_mul(problem.sigma_n2, f21 * f21) + _arr_mul(problem.sigma_w2, h1 * h1)
    return g1 * g1 + num / den


def _arr_mul(var, x):
    x = np.asarray(x, dtype=float)
    if math.isinf(var):
        return np.where(x == 0, 0.0, np.inf)
    return var * x


def g2_from(f21: float, h1: float, p: NoisyFbProblem) -> float:
    """g2 eliminated through the first two stationarity conditions."""
    sn, sw, rho = p.sigma_n2, p.sigma_w2, p.rho
    q = 1.0 + _mul(sw, h1 * h1)
    num = _mul(sn, rho) + (1.0 + sn) * q if not math.isinf(sn) else INF
    den = q + _mul(sn, f21 * h1)
    return -num / den * f21 / math.sqrt(rho)


def f21_for(h1: float, p: NoisyFbProblem) -> float:
    """Unique f21 <= 0 where the second-use power constraint is tight."""
    sn, sw, rho = p.sigma_n2, p.sigma_w2, p.rho
    if math.isinf(sn):
        return 0.0
    q = 1.0 + _mul(sw, h1 * h1)
    lo = -math.sqrt(rho / (1.0 + sn))
    if sn > 0 and h1 > 0:
        lo = max(lo, -q / (sn * h1) * (1.0 - 1e-15))

    def power(f):
        return g2_from(f, h1, p) ** 2 + (1.0 + sn) * f * f - rho

    if power(lo) < 0:
        # the g2 term cannot reach the budget inside the admissible region
        lo_edge = -q / (sn * h1) if sn > 0 and h1 > 0 else lo
        lo = lo_edge * (1.0 - 1e-15)
    f = optimize.brentq(power, lo, 0.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return f


def h1_interior(f21: float, g2: float, p: NoisyFbProblem) -> float:
    """Relay gain where the relay constraint is slack (stationarity in h1)."""
    rho = p.rho
    if p.sigma_w2 == 0:
        return INF
    return math.sqrt(rho) * (1.0 + _mul(p.sigma_n2, f21 * f21)) / (p.sigma_w2 * (g2 - math.sqrt(rho) * f21))


def kkt_terms(g2, f21, h1, p: NoisyFbProblem):
    """(mu2, mu3, stationarity residual in f21) at a candidate point."""
    rho = p.rho
    sr = math.sqrt(rho)
    den = _den(f21, h1, p)
    A = sr * (h1 - f21) + g2
    mu2 = A / (den * g2) if g2 else INF
    sn_f = _mul(p.sigma_n2, f21)
    r2 = (den * sr * A + A * A * sn_f) / den ** 2 + mu2 * (1.0 + p.sigma_n2) * f21 if not math.isinf(p.sigma_n2) else 0.0
    mu3 = (den * sr * A - A * A * _mul(p.sigma_w2, h1)) / den ** 2
    return mu2, mu3, r2


def _solution(g2, f21, h1, p, method, branch, saturated):
    g1 = math.sqrt(p.rho)
    snr = float(snr_formula(g1, g2, f21, h1, p))
    mu2, mu3, r2 = kkt_terms(g2, f21, h1, p)
    if not saturated:
        mu3_res, mu3 = abs(mu3), 0.0
    else:
        mu3_res = 0.0
    return NoisyFbSolution(g1, g2, f21, h1, snr, mu2, mu3, saturated, method, branch, max(abs(r2), mu3_res))


def closed_form(p: NoisyFbProblem) -> NoisyFbSolution | None:
    """Closed-form optimum for the four limiting regimes, else None."""
    rho, sn, sw = p.rho, p.sigma_n2, p.sigma_w2
    hb = p.h_max
    if math.isinf(sw) or p.gamma == 0:
        # relay off; Butman's two-use solution
        if math.isinf(sn):
            return _solution(math.sqrt(rho), 0.0, 0.0, p, "closed_form", "relay_off", True)
        root = math.sqrt((1.0 + (1.0 + rho) * sn) ** 2 + rho * (1.0 + sn))
        g2 = math.sqrt(rho) / root * (sn * rho + 1.0 + sn)
        f21 = -rho / root
        return _solution(g2, f21, 0.0, p, "closed_form", "relay_off", True)
    if math.isinf(sn):
        h1 = min(hb, 1.0 / sw) if sw > 0 else hb
        return _solution(math.sqrt(rho), 0.0, h1, p, "closed_form", "no_feedback", h1 == hb)
    if sn == 0:
        g2 = math.sqrt(rho / (1.0 + rho))
        f21 = -rho / math.sqrt(1.0 + rho)
        h1 = min(hb, 1.0 / (sw * math.sqrt(1.0 + rho))) if sw > 0 else hb
        return _solution(g2, f21, h1, p, "closed_form", "noiseless_feedback", h1 == hb)
    if sw == 0:
        h1 = math.sqrt(p.gamma)
        f21 = f21_for(h1, p)
        g2 = -(1.0 + sn * (1.0 + rho)) / (1.0 + sn * f21 * h1) * f21 / math.sqrt(rho)
        return _solution(g2, f21, h1, p, "closed_form", "noiseless_relay_link", True)
    return None


def _boundary(p: NoisyFbProblem) -> NoisyFbSolution:
    h1 = p.h_max
    f21 = f21_for(h1, p)
    return _solution(g2_from(f21, h1, p), f21, h1, p, "boundary_case", "boundary", True)


def _interior(p: NoisyFbProblem, f0: float, max_iter: int = 10_000, tol: float = 1e-10):
    """Alternate the power-tight f21 equation with the interior h1 equation."""
    hb = p.h_max
    f21 = f0
    h1 = h1_interior(f21, g2_from(f21, hb, p), p)
    for _ in range(max_iter):
        if not (0.0 <= h1 < hb) or not math.isfinite(h1):
            return None
        f_new = f21_for(h1, p)
        g2 = g2_from(f_new, h1, p)
        h_new = h1_interior(f_new, g2, p)
        if not math.isfinite(h_new):
            return None
        if abs(h_new - h1) + abs(f_new - f21) <= tol:
            f21 = f21_for(h_new, p)
            return _solution(g2_from(f21, h_new, p), f21, h_new, p, "kkt_iteration", "interior", False)
        h1, f21 = h_new, f_new
    raise IterationDiverged("interior fixed point did not settle")


def solve(problem: NoisyFbProblem) -> NoisyFbSolution:
    cf = closed_form(problem)
    if cf is not None and (math.isinf(problem.sigma_n2) or math.isinf(problem.sigma_w2)
                           or problem.gamma == 0):
        return cf
    boundary = _boundary(problem)
    try:
        interior = _interior(problem, boundary.f21)
    except IterationDiverged:
        sol = grid_oracle(problem, 1e-3)
        sol.method = "grid_oracle"
        return sol
    if interior is not None and interior.snr > boundary.snr:
        return interior
    return boundary


def grid_oracle(problem: NoisyFbProblem, resolution: float = 1e-3) -> NoisyFbSolution:
    """Exhaustive search over (f21, h1) on a grid.

    For fixed (f21, h1) the SNR is a convex quadratic in (g1, g2) over a box,
    so its maximum sits at one of the four corners; those are evaluated
    exactly instead of gridding g1 and g2.
    """
    p = problem
    rho = p.rho
    fmax = 0.0 if math.isinf(p.sigma_n2) else math.sqrt(rho / (1.0 + p.sigma_n2))
    hb = p.h_max
    nf = max(int(math.ceil(2 * fmax / resolution)), 1)
    nh = max(int(math.ceil(2 * hb / resolution)), 1)
    f = np.linspace(-fmax, fmax, nf + 1) if fmax > 0 else np.zeros(1)
    h = np.linspace(-hb, hb, nh + 1) if hb > 0 else np.zeros(1)
    F, Hh = np.meshgrid(f, h, indexing="ij")
    g2max = np.sqrt(np.maximum(rho - (1.0 + (0.0 if math.isinf(p.sigma_n2) else p.sigma_n2)) * F * F, 0.0))
    best, arg = -np.inf, None
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            g1 = s1 * math.sqrt(rho)
            val = snr_formula(g1, s2 * g2max, F, Hh, p)
            i = np.unravel_index(int(np.argmax(val)), val.shape)
            if val[i] > best:
                best, arg = float(val[i]), (g1, s2 * g2max[i], F[i], Hh[i])
    g1, g2, f21, h1 = (float(v) for v in arg)
    if g1 < 0:
        # the sign-flipped code has the same SNR; report the g1 > 0 member
        g1, g2 = -g1, -g2
    mu2, mu3, r2 = kkt_terms(g2, f21, h1, p) if g2 else (float("nan"), float("nan"), float("nan"))
    return NoisyFbSolution(g1, g2, f21, h1, best, mu2, mu3, abs(abs(h1) - hb) <= resolution, "grid_oracle",
                           "grid", abs(r2))


@dataclass
class SweepPoint:
    h1: float
    snr: float
    g2: float
    f21: float
    branch: str


def sweep_h1(problem: NoisyFbProblem, h1_grid, feedback: bool = True) -> list[SweepPoint]:
    """Best SNR at each fixed relay gain, optimizing (g2, f21) only."""
    p = problem
    hb = p.h_max
    out = []
    for h1 in np.asarray(h1_grid, dtype=float):
        if h1 < 0 or h1 > hb * (1 + 1e-12):
            raise ValueError(f"h1={h1} outside [0, {hb}]")
        if feedback and not math.isinf(p.sigma_n2):
            f21 = f21_for(h1, p)
            g2 = g2_from(f21, h1, p)
        else:
            f21, g2 = 0.0, math.sqrt(p.rho)
        snr = float(snr_formula(math.sqrt(p.rho), g2, f21, h1, p))
        branch = "boundary" if abs(h1 - hb) <= 1e-12 else "interior"
        out.append(SweepPoint(float(h1), snr, g2, f21, branch))
    return out


def peak_gain_pct(problem: NoisyFbProblem, h1_grid) -> float:
    """Peak SNR with feedback over peak SNR without, as a percentage."""
    fb = max(pt.snr for pt in sweep_h1(problem, h1_grid, True))
    nofb = max(pt.snr for pt in sweep_h1(problem, h1_grid, False))
    return 100.0 * (fb / nofb - 1.0)
