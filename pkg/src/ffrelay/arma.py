"""ARMA noise laws, their state-space form and spectral factorization.

An ARMA(p, q) process is written with the delay operator D as

    G(D) x[k] = F(D) eps[k],   G(D) = sum_j beta_j D^j,  F(D) = sum_j alpha_j D^j,

with beta_0 = 1 and a standard normal innovation eps.  Coefficient arrays are
stored lowest power first throughout, so ``np.convolve`` is polynomial
multiplication.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, signal

from .errors import NotPSDSpectrum, UnstableEffectiveNoise, UnstableProcess

TOL_STAB = 1e-9
CANCEL_TOL = 1e-7
PSD_GRID = 4096
PSD_TOL = 1e-9


def _trim(c: np.ndarray, rel: float = 0.0) -> np.ndarray:
    """Drop trailing zero coefficients, always keeping the constant term."""
    c = np.asarray(c, dtype=float)
    scale = np.max(np.abs(c)) if c.size else 0.0
    n = c.size
    while n > 1 and abs(c[n - 1]) <= rel * scale:
        n -= 1
    return c[:n].copy()


def poly_roots(c: Sequence[float]) -> np.ndarray:
    """Zeros of sum_j c_j D^j (companion-matrix eigenvalues)."""
    # a vanishing top coefficient only moves a root to infinity; drop it
    c = _trim(c, rel=1e-30)
    if c.size < 2:
        return np.zeros(0, dtype=complex)
    return np.roots(c[::-1])


def _poly_from_roots(roots: np.ndarray) -> np.ndarray:
    """Real polynomial prod(1 - D/root), lowest power first."""
    if len(roots) == 0:
        return np.ones(1)
    c = np.poly(roots)[::-1]
    return np.real(c / c[0])


def ma_autocovariance(ma: Sequence[float]) -> np.ndarray:
    """Lags 0..q of sum_j a_j eps[k-j]."""
    a = np.asarray(ma, dtype=float)
    full = np.correlate(a, a, mode="full")
    return full[a.size - 1:]


@dataclass(frozen=True)
class ArmaProcess:
    ar_coeffs: np.ndarray = field(default_factory=lambda: np.ones(1))
    ma_coeffs: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        ar = np.atleast_1d(np.asarray(self.ar_coeffs, dtype=float)).copy()
        ma = np.atleast_1d(np.asarray(self.ma_coeffs, dtype=float)).copy()
        if ar.ndim != 1 or ma.ndim != 1 or ar.size == 0 or ma.size == 0:
            raise ValueError("coefficient sequences must be non-empty 1-D")
        if ar[0] != 1.0:
            raise ValueError(f"beta_0 must be exactly 1, got {ar[0]}")
        if not (np.all(np.isfinite(ar)) and np.all(np.isfinite(ma))):
            raise ValueError("coefficients must be finite")
        ar.setflags(write=False)
        ma.setflags(write=False)
        object.__setattr__(self, "ar_coeffs", ar)
        object.__setattr__(self, "ma_coeffs", ma)

    @classmethod
    def white(cls, variance: float = 1.0) -> "ArmaProcess":
        if variance < 0:
            raise ValueError("variance must be non-negative")
        return cls(np.ones(1), np.array([np.sqrt(variance)]))

    @property
    def p(self) -> int:
        return _trim(self.ar_coeffs).size - 1

    @property
    def q(self) -> int:
        return _trim(self.ma_coeffs).size - 1

    @property
    def is_zero(self) -> bool:
        return not np.any(self.ma_coeffs)

    def is_stable(self, tol: float = TOL_STAB) -> bool:
        roots = poly_roots(self.ar_coeffs)
        return bool(np.all(np.abs(roots) > 1.0 + tol))

    def canonical(self) -> "ArmaProcess":
        """Same law with a minimum-phase MA part and alpha_0 > 0."""
        ar = _trim(self.ar_coeffs)
        ma = _trim(self.ma_coeffs)
        if self.is_zero:
            return ArmaProcess(ar, np.zeros(1))
        if ma[0] > 0 and np.all(np.abs(poly_roots(ma)) >= 1.0 - 1e-8):
            return ArmaProcess(ar, ma)
        return ArmaProcess(ar, spectral_factorize(ma_autocovariance(ma)))

    def impulse_response(self, n: int) -> np.ndarray:
        imp = np.zeros(n)
        imp[0] = 1.0
        return signal.lfilter(self.ma_coeffs, self.ar_coeffs, imp)

    def autocovariance(self, nlags: int) -> np.ndarray:
        """Theoretical autocovariance at lags 0..nlags (state-space route)."""
        if not self.is_stable():
            raise UnstableProcess("autocovariance of an unstable process")
        if self.is_zero:
            return np.zeros(nlags + 1)
        ss = to_state_space(self.canonical())
        a0 = ss.alpha0
        out = np.zeros(nlags + 1)
        if ss.d == 0:
            out[0] = a0 * a0
            return out
        Pi = linalg.solve_discrete_lyapunov(ss.P, np.outer(ss.q, ss.q))
        out[0] = a0 * a0 * (ss.r @ Pi @ ss.r + 1.0)
        v = ss.P @ Pi @ ss.r + ss.q
        for k in range(1, nlags + 1):
            out[k] = a0 * a0 * (ss.r @ v)
            v = ss.P @ v
        return out

    def spectrum(self, omega: np.ndarray) -> np.ndarray:
        z = np.exp(-1j * np.asarray(omega))
        num = np.polyval(self.ma_coeffs[::-1], z)
        den = np.polyval(self.ar_coeffs[::-1], z)
        return np.abs(num) ** 2 / np.abs(den) ** 2

    def to_text(self) -> str:
        fmt = lambda c: ", ".join(repr(float(x)) for x in c)
        return f"arma: beta=[{fmt(self.ar_coeffs)}], alpha=[{fmt(self.ma_coeffs)}]"

    @classmethod
    def from_text(cls, text: str) -> "ArmaProcess":
        return parse_arma(text)


_ARMA_RE = re.compile(
    r"^\s*arma\s*:\s*beta\s*=\s*\[([^\]]*)\]\s*,\s*alpha\s*=\s*\[([^\]]*)\]\s*$"
)


def parse_arma(text: str) -> ArmaProcess:
    m = _ARMA_RE.match(text)
    if m is None:
        raise ValueError(f"not an ARMA law: {text!r}")

    def nums(s):
        s = s.strip()
        return [float(x) for x in s.split(",")] if s else []

    beta, alpha = nums(m.group(1)), nums(m.group(2))
    if not beta or not alpha:
        raise ValueError("beta and alpha must be non-empty")
    return ArmaProcess(beta, alpha)


@dataclass(frozen=True)
class StateSpaceModel:
    """b[k+1] = P b[k] + q eps[k],  x[k] = alpha0 * (r . b[k] + eps[k])."""

    P: np.ndarray
    q: np.ndarray
    r: np.ndarray
    alpha0: float
    ar_order: int = 0
    ma_order: int = 0

    @property
    def d(self) -> int:
        return self.q.size

    @property
    def white(self) -> bool:
        return self.d == 0

    def to_arma(self) -> ArmaProcess:
        d = self.d
        beta = np.ones(d + 1)
        beta[1:] = -self.P[0, :] if d else []
        alpha = np.empty(d + 1)
        alpha[0] = self.alpha0
        alpha[1:] = self.alpha0 * (self.r + beta[1:])
        return ArmaProcess(beta[: self.ar_order + 1], alpha[: self.ma_order + 1])


def to_state_space(proc: ArmaProcess) -> StateSpaceModel:
    if not proc.is_stable():
        raise UnstableProcess(f"AR roots inside the unit circle: {proc.ar_coeffs}")
    ar = _trim(proc.ar_coeffs)
    ma = _trim(proc.ma_coeffs)
    if ma[0] <= 0:
        proc = proc.canonical()
        ar, ma = _trim(proc.ar_coeffs), _trim(proc.ma_coeffs)
        if ma[0] <= 0:
            raise UnstableProcess("degenerate process (zero innovation)")
    p, q = ar.size - 1, ma.size - 1
    d = max(p, q)
    beta = np.zeros(d + 1)
    beta[: p + 1] = ar
    alpha = np.zeros(d + 1)
    alpha[: q + 1] = ma
    a0 = float(alpha[0])
    P = np.zeros((d, d))
    if d:
        P[0, :] = -beta[1:]
        P[1:, :-1] = np.eye(d - 1)
    qv = np.zeros(d)
    if d:
        qv[0] = 1.0
    r = alpha[1:] / a0 - beta[1:]
    return StateSpaceModel(P, qv, r, a0, p, q)


def _check_symbol(c: np.ndarray):
    w = np.linspace(0.0, np.pi, PSD_GRID)
    k = np.arange(1, c.size)
    s = c[0] + 2.0 * np.cos(np.outer(w, k)) @ c[1:] if c.size > 1 else np.full(w.size, c[0])
    if np.min(s) < -PSD_TOL:
        raise NotPSDSpectrum(f"spectral symbol reaches {np.min(s):.3e} < 0")


def _wilson_polish(alpha: np.ndarray, c: np.ndarray, iters: int = 6) -> np.ndarray:
    q = alpha.size - 1

    def resid(a):
        return ma_autocovariance(a) - c

    best, best_err = alpha, np.max(np.abs(resid(alpha)))
    a = alpha.copy()
    for _ in range(iters):
        J = np.zeros((q + 1, q + 1))
        for k in range(q + 1):
            for m in range(q + 1):
                if m + k <= q:
                    J[k, m] += a[m + k]
                if m - k >= 0:
                    J[k, m] += a[m - k]
        try:
            a = a - np.linalg.solve(J, resid(a))
        except np.linalg.LinAlgError:
            break
        err = np.max(np.abs(resid(a)))
        if not np.isfinite(err) or err >= best_err:
            break
        best, best_err = a.copy(), err
    return best


def spectral_factorize(autocov: Sequence[float]) -> np.ndarray:
    """Minimum-phase MA coefficients alpha_0..alpha_q for autocovariance c.

    The output has the same length as the input; trailing entries are zero
    when the top lags vanish.
    """
    c_in = np.atleast_1d(np.asarray(autocov, dtype=float))
    nq = c_in.size - 1
    if c_in[0] < -PSD_TOL:
        raise NotPSDSpectrum("negative variance")
    _check_symbol(c_in)
    out = np.zeros(nq + 1)
    if c_in[0] <= 0:
        return out
    c = _trim(c_in, rel=1e-15)
    q = c.size - 1
    if q == 0:
        out[0] = np.sqrt(c[0])
        return out
    laurent = np.concatenate([c[::-1], c[1:]])
    roots = np.roots(laurent)
    order = np.argsort(-np.abs(roots), kind="stable")
    keep = roots[order[:q]]
    f = _poly_from_roots(keep)
    alpha = f * np.sqrt(c[0] / np.sum(f * f))
    alpha = _wilson_polish(alpha, c)
    if alpha[0] < 0:
        alpha = -alpha
    out[: q + 1] = alpha
    return out


def _cancel_common(ar: np.ndarray, ma: np.ndarray, tol: float = CANCEL_TOL):
    ra = list(poly_roots(ar))
    rm = list(poly_roots(ma))
    hit = False
    for root in list(ra):
        if not rm:
            break
        dist = [abs(root - s) for s in rm]
        j = int(np.argmin(dist))
        if dist[j] < tol:
            ra.remove(root)
            rm.pop(j)
            hit = True
    if not hit:
        return ar, ma
    return _poly_from_roots(np.array(ra)), ma[0] * _poly_from_roots(np.array(rm))


TINY_TAP = 1e-150


def tap_array(taps) -> np.ndarray:
    h = np.atleast_1d(np.asarray(getattr(taps, "taps", taps), dtype=float))
    # a tap this small forwards power h^2 that underflows; treat it as off
    return np.where(np.abs(h) < TINY_TAP, 0.0, h)


def relay_polynomial(taps) -> np.ndarray:
    """H(D) = 1 + sum_l h[l] D^l."""
    return np.concatenate([[1.0], tap_array(taps)])


def compose_from_injected(injected: ArmaProcess, z: ArmaProcess, taps) -> ArmaProcess:
    """Law of zt solving H(D) zt = n + z, with n independent of z."""
    h = tap_array(taps)
    if not np.any(h):
        return z.canonical()
    if not (injected.is_stable() and z.is_stable()):
        raise UnstableProcess("component noise is not stable")
    hpoly = relay_polynomial(h)
    if np.any(np.abs(poly_roots(hpoly)) <= 1.0 + TOL_STAB):
        raise UnstableEffectiveNoise(f"relay polynomial has a zero on or inside the unit circle: {h}")
    gz, gn = _trim(z.ar_coeffs), _trim(injected.ar_coeffs)
    ar = np.convolve(np.convolve(gz, gn), hpoly)
    c1 = ma_autocovariance(np.convolve(gz, injected.ma_coeffs))
    c2 = ma_autocovariance(np.convolve(gn, z.ma_coeffs))
    c = np.zeros(max(c1.size, c2.size))
    c[: c1.size] += c1
    c[: c2.size] += c2
    alpha = _trim(spectral_factorize(_trim(c, rel=1e-15)), rel=1e-14)
    ar, alpha = _cancel_common(_trim(ar), alpha)
    return ArmaProcess(ar, alpha)


def compose_effective_noise(w: ArmaProcess, z: ArmaProcess, taps) -> ArmaProcess:
    """Law of the effective noise (I - H^-1) w + H^-1 z."""
    h = tap_array(taps)
    if not np.any(h):
        return z.canonical()
    injected = ArmaProcess(w.ar_coeffs, np.convolve(np.concatenate([[0.0], h]), w.ma_coeffs))
    return compose_from_injected(injected, z, h)


def sample_path(proc: ArmaProcess, n: int, seed: int) -> np.ndarray:
    if not proc.is_stable():
        raise UnstableProcess("cannot sample an unstable process")
    roots = poly_roots(proc.ar_coeffs)
    radius = float(np.max(1.0 / np.abs(roots))) if roots.size else 0.0
    if radius > 0:
        burn = int(min(200_000, np.ceil(40.0 / -np.log(radius)))) + proc.q
    else:
        burn = proc.q
    eps = np.random.default_rng(seed).standard_normal(n + burn)
    return signal.lfilter(proc.ma_coeffs, proc.ar_coeffs, eps)[burn:]
