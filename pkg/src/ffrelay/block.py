"""Finite-block feedback capacity of a filter-and-forward relay channel.

The program, in the variables Ky (symmetric) and B (strictly lower
triangular), is

    maximize    log det Ky
    subject to  tr(Kx) <= D rho,                   Kx = Ky - Kz - B Kz - Kz B^T
                tr(G (Kx + C + C^T + Kw) G^T) <= gamma D rho,
                                                   G = H - I, C = B (I - H^-1) Kw
                Ky - (I + B) Kz (I + B)^T  >  0

with Kz the effective-noise covariance.  It is solved by a primal log-barrier
method with dense Newton steps.  Second derivatives of log det are assembled
from Gram matrices of rank-two directions, which keeps a Newton step at
O(n^2 N) for n = N^2 unknowns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .arma import ArmaProcess
from .errors import Infeasible, SolverStall
from .network import BlockChannel, FirFilter, build_block_channel

NORMALIZATIONS = ("message", "block")
FLOOR_DECREMENT = 1e-6
CENTER_TOL = 1e-9


@dataclass(frozen=True)
class BlockProgram:
    Kz_eff: np.ndarray
    H: np.ndarray
    Kw: np.ndarray
    rho: float
    gamma: float
    N: int
    L: int
    normalization: str = "message"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.N > 64:
            raise ValueError("dense solver is limited to N <= 64")
        if np.linalg.eigvalsh(self.Kz_eff)[0] <= 0:
            raise Infeasible("effective noise covariance is not numerically positive definite")

    @property
    def D(self) -> int:
        """Denominator shared by the rate and both power budgets."""
        return self.N if self.normalization == "message" else self.N + self.L

    @classmethod
    def from_channel(cls, ch: BlockChannel, rho: float, gamma: float, normalization: str = "message"):
        return cls(ch.Kz_eff, ch.H, ch.Kw, rho, gamma, ch.N, ch.L, normalization)

    @classmethod
    def for_taps(cls, taps, w: ArmaProcess, z: ArmaProcess, N: int, rho: float, gamma: float,
                 normalization: str = "message"):
        return cls.from_channel(build_block_channel(taps, w, z, N), rho, gamma, normalization)


@dataclass
class BlockSolution:
    Ky: np.ndarray
    B: np.ndarray
    rate_nats: float
    kkt_residual: float
    constraint_slacks: np.ndarray
    Ks: np.ndarray = None
    newton_steps: int = 0
    extra: dict = field(default_factory=dict)


class _Problem:
    """Index bookkeeping and linear constraint data for one program."""

    def __init__(self, prog: BlockProgram):
        N = prog.N
        self.N = N
        self.Kz = 0.5 * (prog.Kz_eff + prog.Kz_eff.T)
        self.KI, self.KJ = np.triu_indices(N)
        self.BI, self.BJ = np.tril_indices(N, -1)
        self.nK, self.nB = self.KI.size, self.BI.size
        self.diag = self.KI == self.KJ
        I = np.eye(N)
        G = prog.H - I
        Mg = G.T @ G
        F = (I - np.linalg.inv(prog.H)) @ prog.Kw
        D = prog.D
        Kz = self.Kz

        # source: tr(Ky) - tr(Kz) - 2 tr(B Kz) <= D rho
        a_src = np.concatenate([self.diag.astype(float), -2.0 * Kz[self.BJ, self.BI]])
        b_src = D * prog.rho + np.trace(Kz)
        # relay: tr(Mg Kx) + 2 tr(Mg B F) + tr(G Kw G^T) <= gamma D rho
        aK = np.where(self.diag, Mg[self.KI, self.KJ], 2.0 * Mg[self.KI, self.KJ])
        KzMg, FMg = Kz @ Mg, F @ Mg
        aB = -2.0 * KzMg[self.BJ, self.BI] + 2.0 * FMg[self.BJ, self.BI]
        a_rel = np.concatenate([aK, aB])
        b_rel = prog.gamma * D * prog.rho + np.trace(Mg @ Kz) - np.trace(G @ prog.Kw @ G.T)
        self.rows, self.rhs = [], []
        self.dropped = []
        for name, a, b in (("source", a_src, b_src), ("relay", a_rel, b_rel)):
            if not np.any(np.abs(a) > 1e-14):
                if b < -1e-12:
                    raise Infeasible(f"{name} constraint cannot hold (constant part exceeds budget)")
                self.dropped.append(name)
                continue
            self.rows.append(a)
            self.rhs.append(b)
        self.A = np.array(self.rows) if self.rows else np.zeros((0, self.nK + self.nB))
        self.b = np.array(self.rhs)
        # all constraint data, dropped rows included, for slack reporting
        self.A_all = np.array([a_src, a_rel])
        self.b_all = np.array([b_src, b_rel])

    def unpack(self, x):
        N = self.N
        Ky = np.zeros((N, N))
        Ky[self.KI, self.KJ] = x[: self.nK]
        Ky[self.KJ, self.KI] = x[: self.nK]
        B = np.zeros((N, N))
        B[self.BI, self.BJ] = x[self.nK:]
        return Ky, B

    def pack(self, Ky, B):
        return np.concatenate([Ky[self.KI, self.KJ], B[self.BI, self.BJ]])

    def schur(self, Ky, B):
        IB = np.eye(self.N) + B
        S = Ky - IB @ self.Kz @ IB.T
        return 0.5 * (S + S.T), IB


def _gram_pq(P, Q):
    """<M_a, M_b> for M_a = p_a q_a^T + q_a p_a^T (columns of P, Q)."""
    return 2.0 * ((P.T @ P) * (Q.T @ Q) + (P.T @ Q) * (Q.T @ P))


def _chol(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


def _barrier(pb: _Problem, x, t):
    """Value of t log det Ky + log det S + sum log slack, or -inf outside."""
    Ky, B = pb.unpack(x)
    S, _ = pb.schur(Ky, B)
    Ls, Ly = _chol(S), _chol(Ky)
    if Ls is None or Ly is None:
        return -np.inf
    slack = pb.b - pb.A @ x
    if np.any(slack <= 0):
        return -np.inf
    return (t * 2.0 * np.sum(np.log(np.diag(Ly))) + 2.0 * np.sum(np.log(np.diag(Ls)))
            + np.sum(np.log(slack)))


def _derivatives(pb: _Problem, x, t):
    Ky, B = pb.unpack(x)
    S, IB = pb.schur(Ky, B)
    N = pb.N
    Ls = np.linalg.cholesky(S)
    Ly = np.linalg.cholesky(Ky)
    R = linalg.solve_triangular(Ls, np.eye(N), lower=True)
    Ry = linalg.solve_triangular(Ly, np.eye(N), lower=True)
    V = R @ (IB @ pb.Kz)
    KI, KJ, BI, BJ = pb.KI, pb.KJ, pb.BI, pb.BJ
    half = np.where(pb.diag, 0.5, 1.0)

    # log det S: Ky directions then B directions
    P = np.concatenate([R[:, KI], -R[:, BI]], axis=1)
    Q = np.concatenate([R[:, KJ] * half, V[:, BJ]], axis=1)
    g = 2.0 * np.sum(P * Q, axis=0)
    Hm = -_gram_pq(P, Q)
    Sinv = R.T @ R
    Hm[pb.nK:, pb.nK:] -= 2.0 * Sinv[np.ix_(BI, BI)] * pb.Kz[np.ix_(BJ, BJ)]

    # t log det Ky
    Py, Qy = Ry[:, KI], Ry[:, KJ] * half
    g[: pb.nK] += t * 2.0 * np.sum(Py * Qy, axis=0)
    Hm[: pb.nK, : pb.nK] -= t * _gram_pq(Py, Qy)

    # linear slacks
    slack = pb.b - pb.A @ x
    g -= pb.A.T @ (1.0 / slack)
    As = pb.A / slack[:, None]
    Hm -= As.T @ As
    return g, Hm


def _start(pb: _Problem, prog: BlockProgram):
    N = pb.N
    B = np.zeros((N, N))
    base = pb.pack(pb.Kz, B)
    eye = pb.pack(np.eye(N), np.zeros((N, N)))
    # largest delta keeping 10% slack on every kept constraint
    deltas = []
    for a, b in zip(pb.A, pb.b):
        room = b - a @ base
        per = a @ eye
        if room <= 0:
            raise Infeasible(f"no strictly feasible start: B = 0 leaves {room:.3e} room")
        deltas.append(0.9 * room / per if per > 0 else np.inf)
    delta = min(deltas) if deltas else 1.0
    if not np.isfinite(delta):
        delta = 1.0
    return base + delta * eye


def solve_block(prog: BlockProgram, tol: float = 1e-7, t0: float = 1.0, max_newton: int = 200) -> BlockSolution:
    pb = _Problem(prog)
    x = _start(pb, prog)
    m = pb.N + len(pb.b)
    t = t0
    steps = 0
    decrement = np.inf
    t_final = m / tol
    while True:
        for _ in range(max_newton):
            g, Hm = _derivatives(pb, x, t)
            try:
                C = linalg.cho_factor(-Hm, lower=True)
                dx = linalg.cho_solve(C, g)
            except linalg.LinAlgError:
                dx = np.linalg.lstsq(-Hm, g, rcond=None)[0]
            decrement = float(g @ dx)
            steps += 1
            if decrement / 2.0 <= CENTER_TOL:
                break
            f0 = _barrier(pb, x, t)
            alpha = 1.0
            while True:
                xn = x + alpha * dx
                fn = _barrier(pb, xn, t)
                if fn >= f0 + 0.25 * alpha * decrement:
                    break
                alpha *= 0.5
                if alpha < 1e-3 and decrement <= FLOOR_DECREMENT:
                    break
                if alpha < 1e-12:
                    break
            if alpha < 1e-3 and decrement <= FLOOR_DECREMENT:
                break
            if alpha < 1e-12:
                # rounding floor of an ill-conditioned Hessian at large t
                if decrement <= FLOOR_DECREMENT:
                    break
                raise SolverStall(f"line search underflow at t={t:.3g}, decrement={decrement:.3g}")
            x = xn
        else:
            if decrement > FLOOR_DECREMENT:
                raise SolverStall(f"centering did not converge at t={t:.3g}, decrement={decrement:.3g}")
        if t >= t_final:
            break
        t = min(10.0 * t, t_final)
    Ky, B = pb.unpack(x)
    S, _ = pb.schur(Ky, B)
    w, U = np.linalg.eigh(S)
    Ks = (U * np.where(w < 1e-10, 0.0, w)) @ U.T
    _, ld_y = np.linalg.slogdet(Ky)
    _, ld_z = np.linalg.slogdet(pb.Kz)
    rate = (ld_y - ld_z) / (2.0 * prog.D)
    slacks = pb.b_all - pb.A_all @ x
    return BlockSolution(Ky, B, float(rate), float(m / t), slacks, Ks, steps,
                         {"decrement": decrement, "t": t, "dropped": pb.dropped})


def certify(prog: BlockProgram, sol: BlockSolution) -> dict:
    """Recompute objective and constraint slacks from (Ky, B) alone."""
    N = prog.N
    I = np.eye(N)
    Kz = prog.Kz_eff
    Ky, B = sol.Ky, sol.B
    Kx = Ky - Kz - B @ Kz - Kz @ B.T
    G = prog.H - I
    C = B @ (I - np.linalg.inv(prog.H)) @ prog.Kw
    relay = np.trace(G @ (Kx + C + C.T + prog.Kw) @ G.T)
    S = Ky - (I + B) @ Kz @ (I + B).T
    rate = (np.linalg.slogdet(Ky)[1] - np.linalg.slogdet(Kz)[1]) / (2.0 * prog.D)
    return {
        "rate": float(rate),
        "source_power": float(np.trace(Kx)),
        "source_budget": prog.D * prog.rho,
        "relay_power": float(relay),
        "relay_budget": prog.gamma * prog.D * prog.rho,
        "schur_min_eig": float(np.linalg.eigvalsh(0.5 * (S + S.T))[0]),
        "strictly_lower": bool(np.allclose(np.triu(B), 0.0)),
    }


def two_tap_region(rho: float, gamma: float, sigma_w2: float, h1, h2):
    """Stability triangle intersected with the relay-only power disk."""
    h1, h2 = np.asarray(h1), np.asarray(h2)
    stable = (1.0 - np.abs(h1) + h2 > 0) & (np.abs(h2) < 1.0)
    disk = h1 * h1 + h2 * h2 <= gamma * rho / sigma_w2 if sigma_w2 > 0 else np.ones_like(stable)
    return stable & disk


def sample_two_taps(rho: float, gamma: float, sigma_w2: float, trials: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    radius = np.sqrt(gamma * rho / sigma_w2) if sigma_w2 > 0 else np.inf
    ext1, ext2 = min(2.0, radius), min(1.0, radius)
    out = np.zeros((0, 2))
    if ext1 == 0:
        return np.zeros((trials, 2))
    while out.shape[0] < trials:
        cand = rng.uniform([-ext1, -ext2], [ext1, ext2], size=(4 * trials, 2))
        cand = cand[two_tap_region(rho, gamma, sigma_w2, cand[:, 0], cand[:, 1])]
        out = np.vstack([out, cand])
    return out[:trials]


def _solve_candidate(args):
    h, rho, gamma, sigma_w2, N, normalization = args
    prog = BlockProgram.for_taps(FirFilter(h), ArmaProcess.white(sigma_w2), ArmaProcess.white(1.0),
                                 N, rho, gamma, normalization)
    try:
        return solve_block(prog)
    except (Infeasible, SolverStall):
        return None


def random_two_tap_search(rho: float, gamma: float, sigma_w2: float, N: int, trials: int, seed: int,
                          normalization: str = "message", workers: int = 1, include_origin: bool = False):
    """Best of ``trials`` random feasible two-tap filters; returns (taps, solution, log).

    The log lists (h1, h2, rate) for every candidate, rate NaN when the
    candidate's program had no strictly feasible point.
    """
    cands = sample_two_taps(rho, gamma, sigma_w2, trials, seed)
    if include_origin:
        cands = np.vstack([[0.0, 0.0], cands])
    jobs = [(h, rho, gamma, sigma_w2, N, normalization) for h in cands]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            sols = list(ex.map(_solve_candidate, jobs, chunksize=8))
    else:
        sols = [_solve_candidate(j) for j in jobs]
    best = None
    log = []
    for h, sol in zip(cands, sols):
        rate = sol.rate_nats if sol is not None else np.nan
        log.append((float(h[0]), float(h[1]), float(rate)))
        if sol is None:
            continue
        key = (round(rate, 12), -h[0], -h[1])
        if best is None or key > best[0]:
            best = (key, h, sol)
    if best is None:
        raise Infeasible("no candidate produced a feasible program")
    return FirFilter(best[1]), best[2], log
