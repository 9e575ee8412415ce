"""Stationary achievable-rate lower bounds for relay channels with feedback.

The central object is the zero-process-noise form of the filter Riccati
equation.  With c = s + r and A = P - q c^T the recursion

    Sigma <- P Sigma P^T + q q^T - (P Sigma c + q)(P Sigma c + q)^T / (1 + c^T Sigma c)

is algebraically the same as Sigma <- A (Sigma^-1 + c c^T)^-1 A^T, whose
maximal fixed point lives on the unstable invariant subspace of A.  We
compute that solution directly from an ordered real Schur form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .arma import (ArmaProcess, tap_array, StateSpaceModel, compose_effective_noise, spectral_factorize,
                   to_state_space)
from .errors import (InfeasibleGains, InfeasibleTaps, NoConvergence, NoRootInUnitInterval,
                     UnitCircleEigenvalue, UnstableProcess)
from .network import FirFilter

UNIT_TOL = 1e-8
RELAXED = "relaxed_tap_bound"
EXACT = "exact_relay_power"
MODES = (RELAXED, EXACT)


def p2p_rate(rho: float, noise_var: float = 1.0) -> float:
    return 0.5 * np.log1p(rho / noise_var)


@dataclass
class BoundResult:
    rate_nats: float
    taps: FirFilter
    s: np.ndarray
    Sigma: np.ndarray
    source_power_used: float
    relay_power_used: float
    constraint_mode: str = RELAXED
    converged: bool = True
    alpha0: float = 1.0
    relay_power_relaxed: float = 0.0
    relay_power_exact: float = float("nan")
    feasible: bool = True
    extra: dict = field(default_factory=dict)

    def recomputed_rate(self, r: np.ndarray) -> float:
        c = self.s + r
        return 0.5 * np.log1p(c @ self.Sigma @ c)


def pad_model(model: StateSpaceModel) -> StateSpaceModel:
    """Give white noise a one-dimensional (inert) state so s has room to act."""
    if model.d:
        return model
    return StateSpaceModel(np.zeros((1, 1)), np.ones(1), np.zeros(1), model.alpha0,
                           model.ar_order, model.ma_order)


def riccati_step(model: StateSpaceModel, s: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    P, q = model.P, model.q
    c = s + model.r
    g = P @ Sigma @ c + q
    return P @ Sigma @ P.T + np.outer(q, q) - np.outer(g, g) / (1.0 + c @ Sigma @ c)


def riccati_residual(model: StateSpaceModel, s: np.ndarray, Sigma: np.ndarray) -> float:
    return float(np.max(np.abs(riccati_step(model, s, Sigma) - Sigma))) if model.d else 0.0


def _check_unit_circle(A: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvals(A)
    if np.any(np.abs(np.abs(eig) - 1.0) < UNIT_TOL):
        raise UnitCircleEigenvalue(f"closed-loop eigenvalue on the unit circle: {eig}")
    return eig


def riccati_maximal(model: StateSpaceModel, s: np.ndarray) -> np.ndarray:
    """Maximal (stabilizing) solution of the Riccati equation."""
    d = model.d
    if d == 0:
        return np.zeros((0, 0))
    s = np.asarray(s, dtype=float)
    c = s + model.r
    A = model.P - np.outer(model.q, c)
    _check_unit_circle(A)
    if d == 1:
        a, cc = A[0, 0], c[0]
        if abs(a) <= 1.0:
            return np.zeros((1, 1))
        return np.array([[(a * a - 1.0) / (cc * cc)]])
    T, Z, k = linalg.schur(A, output="real", sort="ouc")
    if k == 0:
        return np.zeros((d, d))
    Q1 = Z[:, :k]
    a = np.linalg.inv(T[:k, :k]).T
    cu = a @ (Q1.T @ c)
    Y = linalg.solve_discrete_lyapunov(a, np.outer(cu, cu))
    Y = 0.5 * (Y + Y.T)
    w = np.linalg.eigvalsh(Y)
    if w[0] <= 1e-14 * max(w[-1], 1.0):
        raise NoConvergence("unstable mode not observable through c; Riccati solution unbounded")
    Sigma = Q1 @ np.linalg.solve(Y, Q1.T)
    return 0.5 * (Sigma + Sigma.T)


def riccati_fixed_point(model: StateSpaceModel, s, sigma0=None, tol: float = 1e-12,
                        max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    """Forward iteration of the Riccati recursion; returns (Sigma, rate).

    The default start is the identity.  Starting from q q^T keeps the iterate
    at rank one and can stall on a non-maximal fixed point when more than one
    closed-loop mode is unstable.
    """
    d = model.d
    if d == 0:
        return np.zeros((0, 0)), 0.0
    s = np.asarray(s, dtype=float)
    c = s + model.r
    _check_unit_circle(model.P - np.outer(model.q, c))
    Sigma = np.eye(d) if sigma0 is None else np.array(sigma0, dtype=float)
    for _ in range(max_iter):
        nxt = riccati_step(model, s, Sigma)
        nxt = 0.5 * (nxt + nxt.T)
        if np.max(np.abs(nxt - Sigma)) <= tol:
            return nxt, 0.5 * float(np.log1p(c @ nxt @ c))
        Sigma = nxt
    raise NoConvergence(f"Riccati iteration did not settle in {max_iter} steps")


def riccati_maximal_eig(model: StateSpaceModel, s: np.ndarray) -> np.ndarray:
    """Maximal solution from the eigenvectors of A; the fast path used in searches.

    On the unstable eigenvectors V the solution is V Y^-1 V^H with the Cauchy
    matrix Y_ij = ct_i conj(ct_j) / (conj(l_i) l_j - 1), ct = V^H c.
    """
    c = s + model.r
    A = model.P - np.outer(model.q, c)
    lam, V = np.linalg.eig(A)
    mod = np.abs(lam)
    if np.any(np.abs(mod - 1.0) < UNIT_TOL):
        raise UnitCircleEigenvalue(f"closed-loop eigenvalue on the unit circle: {lam}")
    u = mod > 1.0
    d = model.d
    if not np.any(u):
        return np.zeros((d, d))
    if np.linalg.cond(V) > 1e8:
        return riccati_maximal(model, s)
    Vu, lu = V[:, u], lam[u]
    ct = Vu.conj().T @ c
    Y = np.outer(ct, ct.conj()) / (np.outer(lu.conj(), lu) - 1.0)
    try:
        Sigma = Vu @ np.linalg.solve(Y, Vu.conj().T)
    except np.linalg.LinAlgError:
        raise NoConvergence("unstable mode not observable through c") from None
    Sigma = np.real(0.5 * (Sigma + Sigma.conj().T))
    return Sigma


def rate_and_power(model: StateSpaceModel, s: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(rate, s^T Sigma s, Sigma) at the maximal Riccati solution."""
    Sigma = riccati_maximal(model, s) if model.d == 1 else riccati_maximal_eig(model, s)
    c = s + model.r
    return 0.5 * float(np.log1p(c @ Sigma @ c)), float(s @ Sigma @ s), Sigma


def _scale_to_power(model: StateSpaceModel, u: np.ndarray, target: float) -> float | None:
    # on the unit circle the maximal solution carries no power, so a failed
    # evaluation there counts as below target
    def excess(t):
        try:
            return rate_and_power(model, t * u)[1] - target
        except (UnitCircleEigenvalue, NoConvergence):
            return -target

    lo, hi = 0.0, 1.0
    n = 0
    while not (excess(hi) > 0):
        lo = hi
        hi *= 2.0
        n += 1
        if n > 60:
            return None
    return optimize.brentq(excess, lo, hi, xtol=1e-13, rtol=1e-14, maxiter=500)


def best_rate_for_model(model: StateSpaceModel, rho: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Maximize the Riccati rate over s with the source power constraint active."""
    model = pad_model(model)
    target = rho / model.alpha0 ** 2
    d = model.d

    def eval_dir(v):
        nv = np.linalg.norm(v)
        if nv == 0:
            return -np.inf, None
        u = v / nv
        t = _scale_to_power(model, u, target)
        if t is None:
            return -np.inf, None
        try:
            rate, _, _ = rate_and_power(model, t * u)
        except (UnitCircleEigenvalue, NoConvergence):
            return -np.inf, None
        return rate, t * u

    best_rate, best_s = -np.inf, None

    def keep(v):
        nonlocal best_rate, best_s
        rate, s = eval_dir(v)
        if rate > best_rate:
            best_rate, best_s = rate, s
        return rate

    if d == 1:
        keep(np.ones(1))
        keep(-np.ones(1))
    else:
        # search over directions on the unit sphere in angular coordinates
        def direction(theta):
            v = np.ones(d)
            for i, t in enumerate(np.atleast_1d(theta)):
                v[i] *= np.cos(t)
                v[i + 1:] *= np.sin(t)
            return v

        n_grid = 72 if d == 2 else 12
        axes = [np.linspace(0.0, 2.0 * np.pi if i == d - 2 else np.pi, n_grid, endpoint=False)
                for i in range(d - 1)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d - 1)
        if mesh.shape[0] > 4000:
            mesh = mesh[np.random.default_rng(0).choice(mesh.shape[0], 4000, replace=False)]
        scores = np.array([keep(direction(th)) for th in mesh])
        order = np.argsort(-scores)[:2]
        step = 2.0 * np.pi / n_grid
        for j in order:
            th0 = mesh[j]
            if d == 2:
                optimize.minimize_scalar(lambda t: -keep(direction(t)), bounds=(th0[0] - step, th0[0] + step),
                                         method="bounded", options={"xatol": 1e-11})
            else:
                optimize.minimize(lambda t: -keep(direction(t)), th0, method="Nelder-Mead",
                                  options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 400 * d,
                                           "initial_simplex": th0 + step / 2 * np.vstack(
                                               [np.zeros(d - 1), np.eye(d - 1)])})
    if best_s is None:
        raise NoConvergence("no signalling direction meets the power constraint")
    Sigma = riccati_maximal(model, best_s)
    return best_rate, best_s, Sigma


def relaxed_relay_power(taps, w: ArmaProcess, rho: float) -> float:
    """Relay power when the source sends white power rho (no feedback correlation)."""
    h = tap_array(taps)
    if not np.any(h):
        return 0.0
    hw = ArmaProcess(w.ar_coeffs, np.convolve(np.concatenate([[0.0], h]), w.ma_coeffs))
    return float(rho * h @ h + (0.0 if w.is_zero else hw.autocovariance(0)[0]))


def _polyval_low(c, D):
    return np.polyval(np.asarray(c, dtype=float)[::-1], D)


def stationary_relay_power(taps, w: ArmaProcess, z: ArmaProcess, zt: ArmaProcess,
                           model: StateSpaceModel, s: np.ndarray, Sigma: np.ndarray,
                           nfreq: int = 8192) -> tuple[float, float]:
    """(relay power, source power) of the stationary closed loop.

    The source sends x[k] = alpha0 s^T (b[k] - E[b[k] | past outputs]).  Every
    signal is an LTI image of the two noise innovations, so the powers are
    frequency-domain integrals on a uniform grid.
    """
    h = tap_array(taps)
    omega = 2.0 * np.pi * np.arange(nfreq) / nfreq
    D = np.exp(-1j * omega)
    c = s + model.r
    gain = (model.P @ Sigma @ c + model.q) / (1.0 + c @ Sigma @ c)
    Acl = model.P - np.outer(gain, c)
    g = model.q - gain
    d = model.d
    lhs = np.eye(d)[None, :, :] - D[:, None, None] * Acl[None, :, :]
    rhs = np.broadcast_to(g[:, None], (nfreq, d, 1)).astype(complex)
    X = model.alpha0 * D * (np.linalg.solve(lhs, rhs)[:, :, 0] @ s)
    Psi = _polyval_low(zt.ar_coeffs, D) / _polyval_low(zt.ma_coeffs, D)
    Hm1 = _polyval_low(np.concatenate([[0.0], h]), D)
    Hd = 1.0 + Hm1
    W = _polyval_low(w.ma_coeffs, D) / _polyval_low(w.ar_coeffs, D)
    Z = _polyval_low(z.ma_coeffs, D) / _polyval_low(z.ar_coeffs, D)
    Aw = Hm1 * (X * Psi * Hm1 / Hd * W + W)
    Az = Hm1 * X * Psi / Hd * Z
    relay = float(np.mean(np.abs(Aw) ** 2 + np.abs(Az) ** 2))
    src = float(np.mean(np.abs(X) ** 2))
    return relay, src


def best_rate_for_taps(taps, w: ArmaProcess, z: ArmaProcess, rho: float, gamma: float,
                       mode: str = RELAXED, check: bool = True) -> BoundResult:
    if mode not in MODES:
        raise ValueError(f"unknown constraint mode {mode!r}")
    taps = taps if isinstance(taps, FirFilter) else FirFilter(taps)
    try:
        zt = compose_effective_noise(w, z, taps)
    except UnstableProcess as exc:
        raise InfeasibleTaps(str(exc)) from None
    zt = zt.canonical()
    model = pad_model(to_state_space(zt))
    rate, s, Sigma = best_rate_for_model(model, rho)
    relaxed = relaxed_relay_power(taps, w, rho)
    if taps.is_off:
        exact, src = 0.0, model.alpha0 ** 2 * float(s @ Sigma @ s)
    else:
        exact, src = stationary_relay_power(taps, w, z, zt, model, s, Sigma)
    budget = gamma * rho
    used = relaxed if mode == RELAXED else exact
    feasible = used <= budget * (1 + 1e-9) + 1e-12
    if check and not feasible:
        raise InfeasibleTaps(f"relay power {used:.6g} exceeds budget {budget:.6g} ({mode})")
    return BoundResult(rate, taps, s, Sigma, model.alpha0 ** 2 * float(s @ Sigma @ s), used, mode,
                       True, model.alpha0, relaxed, exact, feasible,
                       {"effective_noise": zt, "model": model, "source_power_spectral": src})


# ---------------------------------------------------------------- quartic forms


def quartic_poly(xi, snr, a, h, psi):
    """snr xi^2 (1 + psi h xi)^2 - (1 - xi^2)(1 + psi a xi)^2."""
    return snr * xi * xi * (1 + psi * h * xi) ** 2 - (1 - xi * xi) * (1 + psi * a * xi) ** 2


def quartic_root(snr, a, h, psi=None, iters: int = 80):
    """Root in (0, 1) of the quartic, by vectorized bisection."""
    snr, a, h = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (snr, a, h)))
    psi = np.sign(h - a) if psi is None else np.broadcast_to(np.asarray(psi, dtype=float), h.shape)
    top = quartic_poly(1.0, snr, a, h, psi)
    if np.any(top <= 0):
        raise NoRootInUnitInterval("quartic does not change sign on (0, 1)")
    lo = np.zeros(h.shape)
    hi = np.ones(h.shape)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        neg = quartic_poly(mid, snr, a, h, psi) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        if np.all(hi - lo <= 1e-15):
            break
    return 0.5 * (lo + hi)


def quartic_rate(h, alpha0, alpha1, rho):
    """-log xi0 for the ARMA(1,1) noise zt + h zt[k-1] = alpha0 e + alpha1 e[k-1]."""
    h = np.asarray(h, dtype=float)
    a0 = np.asarray(alpha0, dtype=float)
    xi = quartic_root(rho / (a0 * a0), np.asarray(alpha1, dtype=float) / a0, h)
    return -np.log(xi)


def ma1_effective(h, w: ArmaProcess, z: ArmaProcess):
    """(alpha0, alpha1) of the single-tap effective noise for MA(1)/white w, z."""
    h = np.asarray(h, dtype=float)
    wm = np.pad(np.asarray(w.ma_coeffs, dtype=float), (0, 2))[:2]
    zm = np.pad(np.asarray(z.ma_coeffs, dtype=float), (0, 2))[:2]
    c0 = zm @ zm + h * h * (wm @ wm)
    c1 = zm[0] * zm[1] + h * h * wm[0] * wm[1]
    disc = np.sqrt(np.maximum(c0 * c0 - 4 * c1 * c1, 0.0))
    a0 = np.sqrt(0.5 * (c0 + disc))
    a1 = np.where(a0 > 0, c1 / np.where(a0 > 0, a0, 1.0), 0.0)
    return a0, a1


def _is_ma1(p: ArmaProcess) -> bool:
    return p.p == 0 and p.q <= 1


def tap_limit(rho: float, gamma: float, sigma_w2: float) -> float:
    return float(np.sqrt(min(gamma * rho / (rho + sigma_w2), 1.0)))


def quartic_bound_ma1(w: ArmaProcess, z: ArmaProcess, rho: float, gamma: float,
                      resolution: float = 1e-4, refine: bool = True) -> BoundResult:
    if not (_is_ma1(w) and _is_ma1(z)):
        raise ValueError("quartic bound needs MA(1) or white noises")
    sigma_w2 = float(w.autocovariance(0)[0]) if not w.is_zero else 0.0
    hmax = tap_limit(rho, gamma, sigma_w2)
    n = max(int(round(2 * hmax / resolution)), 0)
    grid = np.linspace(-hmax, hmax, n + 1) if n else np.zeros(1)

    def rate_of(h):
        a0, a1 = ma1_effective(h, w, z)
        return quartic_rate(h, a0, a1, rho)

    rates = rate_of(grid)
    i = int(np.argmax(rates))
    h_best, r_best = float(grid[i]), float(rates[i])
    if refine and n:
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, n)]
        res = optimize.minimize_scalar(lambda x: -float(rate_of(x)), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        if -res.fun > r_best:
            h_best, r_best = float(res.x), float(-res.fun)
    a0, a1 = ma1_effective(h_best, w, z)
    return _quartic_result(h_best, float(a0), float(a1), rho, w, r_best)


def _quartic_result(h, a0, a1, rho, w, rate):
    """Wrap a quartic optimum, recovering s and Sigma from the d=1 Riccati."""
    zt = ArmaProcess([1.0, h], [a0, a1])
    relaxed = relaxed_relay_power([h], w, rho) if w is not None else float("nan")
    try:
        model = pad_model(to_state_space(zt))
        r_ric, s, Sigma = best_rate_for_model(model, rho)
        src = a0 * a0 * float(s @ Sigma @ s)
    except (UnstableProcess, UnitCircleEigenvalue, NoConvergence):
        s, Sigma, src = np.full(1, np.nan), np.full((1, 1), np.nan), float("nan")
    return BoundResult(float(rate), FirFilter([h]), s, Sigma, src, relaxed, RELAXED, True, a0, relaxed,
                       extra={"alpha1": a1})


# ---------------------------------------------------------------- networks


def _parallel_rate(hs, sig2, rho):
    a0 = np.sqrt(1.0 + np.sum(hs * hs * sig2))
    return float(quartic_rate(np.sum(hs), a0, 0.0, rho))


def _parallel_gains_for_total(t: float, sig2: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Gains summing to t with the least injected noise sum h^2 sigma^2.

    Noise-free relays carry as much of t as they can first; the rest is
    water-filled, h_i = clip(lam / sigma_i^2, -box_i, box_i).
    """
    h = np.zeros(sig2.size)
    sign = 1.0 if t >= 0 else -1.0
    left = abs(t)
    quiet = sig2 <= 0
    free = float(box[quiet].sum())
    if free > 0:
        share = min(left, free) / free
        h[quiet] = sign * share * box[quiet]
        left -= min(left, free)
    noisy = ~quiet
    if left <= 0 or not np.any(noisy):
        return h
    b, v = box[noisy], sig2[noisy]

    def total(lam):
        return float(np.minimum(lam / v, b).sum()) - left

    hi = float(np.max(b * v))
    lam = hi if total(hi) <= 0 else optimize.brentq(total, 0.0, hi, xtol=1e-15, rtol=1e-14)
    h[noisy] = sign * np.minimum(lam / v, b)
    return h


def parallel_bound(gains, sigma2, gammas, rho: float, npts: int = 401) -> BoundResult:
    """Parallel amplify-and-forward relays.

    The rate depends on the gains only through their sum and the injected
    noise, so the search runs over the sum with least-noise gains at each
    value.  ``gains``, when given, is evaluated as an extra candidate.
    """
    sig2 = np.asarray(sigma2, dtype=float)
    gam = np.asarray(gammas, dtype=float)
    if not (sig2.size == gam.size):
        raise InfeasibleGains("sigma2 and gammas must have equal length")
    box = np.sqrt(gam * rho / (rho + sig2))
    tmax = min(float(box.sum()), 1.0)

    def rate_at(t):
        return _parallel_rate(_parallel_gains_for_total(t, sig2, box), sig2, rho)

    grid = np.linspace(-tmax, tmax, npts) if tmax > 0 else np.zeros(1)
    vals = [rate_at(t) for t in grid]
    j = int(np.argmax(vals))
    t_best, rate = float(grid[j]), float(vals[j])
    if tmax > 0:
        a, b = grid[max(j - 1, 0)], grid[min(j + 1, npts - 1)]
        res = optimize.minimize_scalar(lambda t: -rate_at(t), bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-12})
        if -res.fun > rate:
            t_best, rate = float(res.x), float(-res.fun)
    h = _parallel_gains_for_total(t_best, sig2, box)
    if gains is not None:
        g = np.asarray(gains, dtype=float)
        if g.size != sig2.size or np.any(np.abs(g) > box + 1e-12) or abs(g.sum()) > 1 + 1e-12:
            raise InfeasibleGains("gains violate the box or sum constraint")
        r_g = _parallel_rate(g, sig2, rho)
        if r_g > rate:
            h, rate = g, r_g
    a0 = float(np.sqrt(1.0 + np.sum(h * h * sig2)))
    res = _quartic_result(float(h.sum()), a0, 0.0, rho, None, rate)
    res.extra.update({"gains": h, "relay_powers": h * h * (rho + sig2), "budgets": gam * rho})
    res.relay_power_used = float(np.sum(h * h * (rho + sig2)))
    return res


def series_model(gains, sigma2) -> ArmaProcess:
    """AR at lag |V|: zt[k] + (prod h) zt[k-V] = sqrt(1 + sum_j prod_{i>=j} h_i^2 sigma_j^2) e[k]."""
    h = np.asarray(gains, dtype=float)
    sig2 = np.asarray(sigma2, dtype=float)
    V = h.size
    suffix = np.cumprod((h * h)[::-1])[::-1]
    var = 1.0 + float(np.sum(suffix * sig2))
    ar = np.zeros(V + 1)
    ar[0] = 1.0
    ar[V] = float(np.prod(h))
    return ArmaProcess(ar, [np.sqrt(var)])


def series_limits(sigma2, gammas, rho: float) -> np.ndarray:
    gam = np.concatenate([[1.0], np.asarray(gammas, dtype=float)])
    sig2 = np.asarray(sigma2, dtype=float)
    return np.sqrt(gam[1:] * rho / (gam[:-1] * rho + sig2))


def _series_gains_for_product(g: float, limits: np.ndarray) -> np.ndarray:
    """Gains with the given product that minimize the injected noise.

    Every suffix product prod_{i>=j} |h_i| is smallest when the magnitude is
    front-loaded, so all but the last relay run at their limit.
    """
    h = limits.copy()
    head = float(np.prod(limits[:-1]))
    h[-1] = abs(g) / head if head > 0 else 0.0
    if g < 0:
        h[-1] = -h[-1]
    return h


def series_bound(gains, sigma2, gammas, rho: float, npts: int = 41) -> BoundResult:
    """Series chain of amplify-and-forward relays.

    ``gains`` given explicitly evaluates that point; ``None`` optimizes.
    """
    sig2 = np.asarray(sigma2, dtype=float)
    limits = series_limits(sig2, gammas, rho)

    def evaluate(h):
        proc = series_model(h, sig2)
        if not proc.is_stable():
            return -np.inf, None
        model = to_state_space(proc)
        rate, s, Sigma = best_rate_for_model(model, rho)
        return rate, (s, Sigma, model)

    if gains is not None:
        h = np.asarray(gains, dtype=float)
        if h.size != sig2.size or np.any(np.abs(h) > limits + 1e-12):
            raise InfeasibleGains("gains violate the cascaded power limits")
        if np.prod(h) ** 2 >= 1:
            raise InfeasibleGains("product of gains must have magnitude below one")
        rate, aux = evaluate(h)
    else:
        gmax = min(float(np.prod(limits)), 1.0 - 1e-6)
        if gmax <= 0:
            h = np.zeros(sig2.size)
            rate, aux = evaluate(h)
        else:
            grid = np.linspace(-gmax, gmax, npts)
            vals = [evaluate(_series_gains_for_product(g, limits))[0] for g in grid]
            j = int(np.argmax(vals))
            a, b = grid[max(j - 1, 0)], grid[min(j + 1, npts - 1)]
            res = optimize.minimize_scalar(lambda g: -evaluate(_series_gains_for_product(g, limits))[0],
                                           bounds=(a, b), method="bounded", options={"xatol": 1e-10})
            g = res.x if -res.fun > vals[j] else grid[j]
            h = _series_gains_for_product(g, limits)
            rate, aux = evaluate(h)
    s, Sigma, model = aux
    return BoundResult(rate, FirFilter(h), s, Sigma, model.alpha0 ** 2 * float(s @ Sigma @ s), float("nan"),
                       RELAXED, True, model.alpha0, extra={"gains": h, "limits": limits})


# ---------------------------------------------------------------- sweeps


def ma1_relay_noise(sigma_w2: float, chi: float) -> ArmaProcess:
    """w[k] = sigma_w chi e[k] + sigma_w sqrt(1 - chi^2) e[k-1]."""
    sw = np.sqrt(sigma_w2)
    return ArmaProcess([1.0], [sw * chi, sw * np.sqrt(1.0 - chi * chi)])


@dataclass
class SweepRow:
    gamma: float
    chi: float
    h_opt: float
    rate_nats: float
    rate_gain_pct: float
    constraint_mode: str


def single_tap_sweep(rho: float, sigma_w2: float, chi: float, gammas, mode: str = RELAXED,
                     resolution: float = 1e-3) -> list[SweepRow]:
    """Best single-tap rate for each gamma with MA(1) relay noise and unit white z.

    The rate at a tap comes from the quartic; the tap set allowed at a given
    gamma follows the constraint mode (relaxed bound or exact closed-loop power).
    """
    w = ma1_relay_noise(sigma_w2, chi)
    z = ArmaProcess.white(1.0)
    base = p2p_rate(rho)
    n = int(round(2.0 / resolution))
    grid = np.linspace(-1.0, 1.0, n + 1)
    a0, a1 = ma1_effective(grid, w, z)
    rates = quartic_rate(grid, a0, a1, rho)
    if mode == RELAXED:
        power = grid * grid * (rho + sigma_w2)
    else:
        power = np.array([_exact_power_single(h, w, z, rho) for h in grid])
    power = np.where(np.abs(grid) >= 1.0, np.inf, power)
    power[np.abs(grid) < 1e-15] = 0.0
    rows = []
    for gamma in np.atleast_1d(gammas):
        budget = gamma * rho
        ok = power <= budget * (1 + 1e-12) + 1e-15
        if mode == RELAXED:
            # the relaxed bound also admits the stability edge |h| = 1
            ok |= (np.abs(grid) <= tap_limit(rho, gamma, sigma_w2) + 1e-15)
        r = np.where(ok, rates, -np.inf)
        i = int(np.argmax(r))
        h, best = float(grid[i]), float(r[i])
        if mode == RELAXED:
            hmax = tap_limit(rho, gamma, sigma_w2)
            lo, hi = max(h - resolution, -hmax), min(h + resolution, hmax)
            if hi > lo:
                f = lambda x: -float(quartic_rate(x, *ma1_effective(x, w, z), rho))
                res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
                if -res.fun > best:
                    h, best = float(res.x), float(-res.fun)
        rows.append(SweepRow(float(gamma), float(chi), h, best, 100.0 * (best / base - 1.0), mode))
    return rows


def _exact_power_single(h: float, w: ArmaProcess, z: ArmaProcess, rho: float) -> float:
    if abs(h) < 1e-15:
        return 0.0
    if abs(h) >= 1.0:
        return np.inf
    try:
        res = best_rate_for_taps([h], w, z, rho, np.inf, mode=EXACT, check=False)
    except (InfeasibleTaps, UnitCircleEigenvalue, NoConvergence):
        return np.inf
    return res.relay_power_exact
