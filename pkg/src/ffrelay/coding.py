"""Monte-Carlo closed-loop feedback coding over the reduced channel.

The destination sees y = x + zt, where zt is the effective noise with
state-space model b[k+1] = P b[k] + q e[k], zt[k] = alpha0 (r^T b[k] + e[k]).
With c = s + r and A = P - q c^T the noise state obeys
b[k+1] = A b[k] + q ybar'[k] once the destination adds back its own estimate,
so the only thing it does not know is an initial offset.  The message is
placed in that offset, one PAM coordinate per unstable mode, and the source
sends alpha0 s^T of the destination's current estimation error.

Simulation runs in error coordinates: the Kalman gains are deterministic, so
trials are vectorized and only the errors (never the huge-precision estimates)
are propagated.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .arma import ArmaProcess, StateSpaceModel, compose_effective_noise, relay_polynomial, sample_path, to_state_space
from .bounds import best_rate_for_model, pad_model, riccati_maximal
from .errors import PowerViolation

SER_TARGET = 1e-3
CHUNK = 4096
# beyond this the PAM grid is finer than double precision resolves near the edge
PAM_EXACT_MAX = 2 ** 40


@dataclass
class ClosedLoopRun:
    model: StateSpaceModel
    s: np.ndarray
    M: int
    N: int
    trials: int
    seed: int
    rho: float | None = None
    workers: int = 1
    measured: dict = field(default_factory=dict)


def pam_points(M: int) -> np.ndarray:
    """Unit average energy M-PAM."""
    if M == 1:
        return np.zeros(1)
    k = np.arange(M) - (M - 1) / 2.0
    return k * math.sqrt(12.0 / (M * M - 1.0))


def pam_spacing(M: float) -> float:
    return math.sqrt(12.0 / (M * M - 1.0)) if M > 1 else math.inf


@dataclass
class _Gains:
    """Deterministic quantities shared by every trial.

    Message coordinates live on the unstable modes of A, one per real mode
    and two per complex pair, ordered by decreasing modulus.  Matrices with a
    hat are rescaled by the per-mode growth lam^k so they stay O(1).
    """
    W: np.ndarray        # (d, k) mode basis
    lam: np.ndarray      # (k,) modulus of each coordinate's mode
    L: np.ndarray        # (k, k) lower Cholesky factor, W L L^T W^T = Sigma
    Tinv: np.ndarray     # prior precision of the mode coordinates
    h: np.ndarray        # (N, k) regression row c^T A^k W
    sg: np.ndarray       # (N, k) source row s^T A^k W
    K: np.ndarray        # (N, k) RLS gain after use k
    J_hat: np.ndarray    # (N, k, k) scaled posterior precision
    G_hat: np.ndarray    # (N, k, k) scaled Fisher information


def _unstable_modes(A: np.ndarray):
    vals, vecs = np.linalg.eig(A)
    cols, lam = [], []
    for i in np.argsort(-np.abs(vals), kind="stable"):
        z = vals[i]
        if abs(z) <= 1.0 + 1e-10 or z.imag < -1e-12:
            continue
        v = vecs[:, i]
        if abs(z.imag) <= 1e-12:
            cols.append(v.real / np.linalg.norm(v.real))
            lam.append(abs(z))
        else:
            # rotate so the real and imaginary parts are orthogonal
            phi = 0.5 * math.atan2(2.0 * (v.real @ v.imag), v.real @ v.real - v.imag @ v.imag)
            v = v * np.exp(-1j * phi)
            for part in (v.real, v.imag):
                cols.append(part / np.linalg.norm(part))
                lam.append(abs(z))
    return np.array(cols).T.reshape(A.shape[0], len(cols)), np.array(lam)


def _gains(model: StateSpaceModel, s: np.ndarray, N: int) -> _Gains:
    # b[0] is known to both ends (infinite past), so the destination's only
    # unknown is the offset and its Kalman filter is recursive least squares
    # on ybar'[k] = c^T A^k W phi + e[k].  Information form keeps full
    # relative precision even when the error variance is far below 1e-16.
    c = s + model.r
    A = model.P - np.outer(model.q, c)
    Sigma = riccati_maximal(model, s)
    W, lam = _unstable_modes(A)
    k = lam.size
    if k == 0:
        raise ValueError("no unstable closed-loop mode; this scheme carries no rate")
    if N < k:
        raise ValueError(f"blocklength must be at least {k}, the number of message coordinates")
    if N * math.log(lam[0]) > 600:
        raise ValueError("blocklength too long for double precision at this rate")
    Wp = np.linalg.pinv(W)
    T = Wp @ Sigma @ Wp.T
    T = 0.5 * (T + T.T)
    if np.linalg.norm(W @ T @ W.T - Sigma) > 1e-7 * max(np.linalg.norm(Sigma), 1e-300):
        raise ValueError("Riccati solution does not live on the unstable modes (defective A?)")
    L = np.linalg.cholesky(T)
    Tinv = np.linalg.inv(T)
    h = np.empty((N, k))
    sg = np.empty((N, k))
    K = np.empty((N, k))
    J_hat = np.empty((N, k, k))
    G_hat = np.empty((N, k, k))
    cur = W.copy()
    Jh, Gh = Tinv.copy(), np.zeros((k, k))
    S = np.diag(1.0 / lam)
    for i in range(N):
        h[i] = c @ cur
        sg[i] = s @ cur
        g = h[i] / lam ** i
        if i:
            Jh, Gh = S @ Jh @ S, S @ Gh @ S
        Jh = Jh + np.outer(g, g)
        Gh = Gh + np.outer(g, g)
        J_hat[i], G_hat[i] = Jh, Gh
        K[i] = np.linalg.solve(Jh, g) / lam ** i
        cur = A @ cur
    return _Gains(W, lam, L, Tinv, h, sg, K, J_hat, G_hat)


def _ml_error(g: _Gains, i: int, phi: np.ndarray, err: np.ndarray) -> np.ndarray:
    """ML error of the unit-energy symbols after use i, from the MMSE error."""
    dk = g.lam ** i
    rhs = (phi @ g.Tinv) / dk - (err * dk) @ g.J_hat[i]
    out = np.linalg.solve(g.G_hat[i], rhs.T).T / dk
    return np.linalg.solve(g.L, out.T).T


def _split_constellation(M: int | None, lam: np.ndarray) -> list:
    """Per-coordinate PAM sizes with log sizes in proportion to log lam."""
    if not M:
        return []
    if lam.size == 1:
        return [int(M)]
    w = np.log(lam) / np.log(lam).sum()
    return [max(1, int(round(math.exp(wi * math.log(M))))) for wi in w]


def _chunks(trials: int):
    n = (trials + CHUNK - 1) // CHUNK
    for i in range(n):
        yield i, min(CHUNK, trials - i * CHUNK)


def _simulate_chunk(args):
    """Run one chunk of trials; returns per-use sums and final ML errors."""
    model, s, g, N, sizes, seed, idx, n = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
    k = g.lam.size
    u = np.empty((n, k))
    sym = np.full((n, k), -1, dtype=np.int64)
    for j in range(k):
        Mj = sizes[j] if sizes else None
        if Mj is None or Mj > PAM_EXACT_MAX:
            u[:, j] = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), n)
        elif Mj == 1:
            sym[:, j] = 0
            u[:, j] = 0.0
        else:
            sym[:, j] = rng.integers(0, Mj, n)
            u[:, j] = (sym[:, j] - (Mj - 1) / 2.0) * pam_spacing(Mj)
    phi = u @ g.L.T
    err = phi.copy()                   # MMSE error of phi before use i
    v = phi @ g.W.T                    # offset part of the noise state, decays through P
    a0 = model.alpha0
    x_sq = np.zeros(N)
    nu_sq = np.zeros(N)
    nu_lag = np.zeros((N, 11))
    nu_hist = np.zeros((n, 11))
    err_sq = np.full(N, np.nan)
    ml = np.zeros((n, k))
    for i in range(N):
        eps = rng.standard_normal(n)
        x = a0 * (err @ g.sg[i] + v @ model.r)
        nu = err @ g.h[i] + eps
        x_sq[i] = x @ x
        nu_sq[i] = nu @ nu
        nu_hist = np.roll(nu_hist, 1, axis=1)
        nu_hist[:, 0] = nu
        nu_lag[i] = nu @ nu_hist
        err = err - np.outer(nu, g.K[i])
        if i + 1 >= k:
            ml = _ml_error(g, i, phi, err)
            err_sq[i] = float(np.sum(ml * ml)) / k
        v = v @ model.P.T
    return x_sq, nu_sq, nu_lag, err_sq, ml, sym


def _run_chunks(model, s, g, N, sizes, trials, seed, workers):
    jobs = [(model, s, g, N, sizes, seed, i, n) for i, n in _chunks(trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    x_sq = sum(p[0] for p in parts)
    nu_sq = sum(p[1] for p in parts)
    nu_lag = sum(p[2] for p in parts)
    err_sq = sum(p[3] for p in parts)
    ml = np.concatenate([p[4] for p in parts])
    sym = np.concatenate([p[5] for p in parts])
    return x_sq, nu_sq, nu_lag, err_sq, ml, sym


def symbol_errors(ml_err: np.ndarray, sym: np.ndarray | None, M: float) -> np.ndarray:
    """Minimum-distance decision errors for M-PAM given estimation errors."""
    if M <= 1:
        return np.zeros(ml_err.shape, dtype=bool)
    half = pam_spacing(M) / 2.0
    wrong = np.abs(ml_err) > half
    if sym is not None:
        Mi = int(M)
        wrong = np.where(sym == 0, ml_err > half, wrong)
        wrong = np.where(sym == Mi - 1, ml_err < -half, wrong)
    return wrong


def empirical_rate(ml_err: np.ndarray, N: int, target: float = SER_TARGET) -> float:
    """Largest log(M)/N whose measured SER stays below target.

    The estimation error does not depend on the transmitted symbol, so one
    error sample serves every constellation size.  Edge symbols are ignored,
    which can only make the count pessimistic.
    """
    a = np.sort(np.abs(ml_err))[::-1]
    allowed = int(math.ceil(target * a.size)) - 1
    if allowed < 0 or allowed >= a.size:
        return 0.0
    half = a[allowed] * (1.0 + 1e-12)
    spacing = 2.0 * half
    M = math.floor(math.sqrt(12.0 / spacing ** 2 + 1.0))
    if M <= 1:
        return 0.0
    return math.log(M) / N


def run_closed_loop(cfg: ClosedLoopRun) -> dict:
    model = pad_model(cfg.model)
    s = np.asarray(cfg.s, dtype=float)
    g = _gains(model, s, cfg.N)
    k = g.lam.size
    sizes = _split_constellation(cfg.M, g.lam)
    x_sq, nu_sq, nu_lag, err_sq, ml, sym = _run_chunks(model, s, g, cfg.N, sizes, cfg.trials, cfg.seed, cfg.workers)
    T = cfg.trials
    power = x_sq / T
    avg_power = float(power.mean())
    if cfg.rho is not None and avg_power > cfg.rho * (1.0 + 3.0 / math.sqrt(T)):
        raise PowerViolation(f"measured power {avg_power:.6g} exceeds {cfg.rho:.6g}")
    snr = 1.0 / (err_sq / T)
    wrong = np.zeros(T, dtype=bool)
    for j, Mj in enumerate(sizes):
        wrong |= symbol_errors(ml[:, j], sym[:, j] if Mj <= PAM_EXACT_MAX else None, Mj)
    expected = np.full(cfg.N, np.nan)
    Li = np.linalg.inv(g.L)
    for i in range(k - 1, cfg.N):
        # mean per-coordinate ML error variance in the unit-energy symbol basis
        dk = g.lam ** i
        cov = np.linalg.inv(g.G_hat[i]) / np.outer(dk, dk)
        expected[i] = k / np.trace(Li @ cov @ Li.T)
    nu_var = nu_sq / T
    lagcorr = np.zeros(10)
    # lag-l correlation of the innovations, pooled over uses with full history
    for lag in range(1, 11):
        if cfg.N > lag:
            num = nu_lag[lag:, lag].sum()
            den = math.sqrt(nu_sq[lag:].sum() * nu_sq[:-lag].sum())
            lagcorr[lag - 1] = num / den
    out = {
        "empirical_snr_trajectory": snr,
        "expected_snr_trajectory": expected,
        "symbol_error_rate": float(wrong.mean()),
        # a union bound splits the error budget across coordinates
        "empirical_rate": sum(empirical_rate(ml[:, j], cfg.N, SER_TARGET / k) for j in range(k)),
        "message_coordinates": k,
        "constellation": sizes,
        "power_per_use": power,
        "average_power": avg_power,
        "innovation_variance": nu_var,
        "innovation_lag_correlation": lagcorr,
        "innovation_pairs": np.array([(cfg.N - l) * T for l in range(1, 11)], dtype=float),
    }
    cfg.measured = out
    return out


def sk_snr(rho: float, N: int) -> float:
    """Noiseless-feedback SNR after N uses over unit white noise."""
    snr = 0.0
    for _ in range(N):
        # each use adds rho of fresh information on top of the running estimate
        snr = snr + rho * (1.0 + snr)
    return snr


def error_collapse_study(model: StateSpaceModel, s, rate_fraction: float, N_list, trials: int, seed: int,
                         bound_rate: float | None = None, workers: int = 1) -> list[dict]:
    if rate_fraction >= 1:
        raise ValueError("rate_fraction must be below 1")
    model = pad_model(model)
    s = np.asarray(s, dtype=float)
    if bound_rate is None:
        from .bounds import rate_and_power
        bound_rate = rate_and_power(model, s)[0]
    rows = []
    for N in N_list:
        M = max(1, int(round(math.exp(rate_fraction * bound_rate * N))))
        res = run_closed_loop(ClosedLoopRun(model, s, M, N, trials, seed + N, workers=workers))
        ser = res["symbol_error_rate"]
        lll = math.log(-math.log(ser)) if 0 < ser < 1 else math.nan
        rows.append({"N": N, "M": M, "trials": trials, "ser": ser,
                     "empirical_rate": res["empirical_rate"], "bound_rate": bound_rate,
                     "loglog_ser": lll})
    return rows


def relay_power_mc(taps, w: ArmaProcess, z: ArmaProcess, rho: float, n: int, seed: int,
                   s=None) -> tuple[float, float]:
    """(relay, source) power from a time-domain simulation of the full network.

    The relay really forwards its filtered received signal; the effective
    noise innovations are recovered from the simulated noise by inverse
    filtering, and the source runs the stationary feedback loop on them.
    """
    zt = compose_effective_noise(w, z, taps)
    model = pad_model(to_state_space(zt))
    if s is None:
        _, s, _ = best_rate_for_model(model, rho)
    Sigma = riccati_maximal(model, s)
    burn = 2000
    wp = sample_path(w, n + burn, seed)
    zp = sample_path(z, n + burn, seed + 1)
    H = relay_polynomial(taps)
    Hm1 = H.copy()
    Hm1[0] = 0.0
    injected = signal.lfilter(Hm1, [1.0], wp) + zp
    zt_path = signal.lfilter([1.0], H, injected)
    # unit innovations of the effective noise (its MA part is minimum phase)
    eps = signal.lfilter(zt.ar_coeffs, zt.ma_coeffs, zt_path)
    c = s + model.r
    A = model.P - np.outer(model.q, c)
    K = Sigma @ c / (1.0 + c @ Sigma @ c)
    rng = np.random.default_rng(seed + 2)
    e = rng.multivariate_normal(np.zeros(model.d), Sigma, method="eigh")
    x = np.empty(n + burn)
    for k in range(n + burn):
        x[k] = model.alpha0 * (s @ e)
        nu = c @ e + eps[k]
        e = A @ (e - K * nu)
    relay_out = signal.lfilter(Hm1, [1.0], x + wp)
    return float(np.mean(relay_out[burn:] ** 2)), float(np.mean(x[burn:] ** 2))
