"""Filter-and-forward relay networks and their block-matrix channel form."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .arma import ArmaProcess, compose_from_injected, ma_autocovariance, spectral_factorize, tap_array, _trim
from .errors import CyclicGraph, DimensionMismatch, DisconnectedSource, NetworkError

SOURCE, DEST = "S", "D"


@dataclass(frozen=True)
class FirFilter:
    """Relay taps h[1..L]; h[l] multiplies the input delayed by l."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.taps, dtype=float)).copy()
        if t.ndim != 1 or t.size < 1:
            raise ValueError("a filter needs at least one tap")
        if not np.all(np.isfinite(t)):
            raise ValueError("taps must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "taps", t)

    @property
    def L(self) -> int:
        return self.taps.size

    @property
    def memory(self) -> int:
        """Index of the last non-zero tap (0 for a switched-off relay)."""
        nz = np.flatnonzero(self.taps)
        return int(nz[-1]) + 1 if nz.size else 0

    @property
    def polynomial(self) -> np.ndarray:
        """sum_l h[l] D^l, lowest power first (constant term zero)."""
        return np.concatenate([[0.0], self.taps])

    @property
    def is_off(self) -> bool:
        return not np.any(self.taps)


@dataclass(frozen=True)
class RelayNode:
    id: str
    filter: FirFilter
    noise: ArmaProcess
    power_factor: float = 1.0

    def __post_init__(self):
        if self.id in (SOURCE, DEST):
            raise NetworkError(f"node id {self.id!r} is reserved")
        if self.power_factor < 0:
            raise NetworkError("power factor must be non-negative")


@dataclass(frozen=True)
class RelayNetwork:
    nodes: tuple[RelayNode, ...]
    edges: tuple[tuple[str, str], ...]
    source_power: float = 1.0
    dest_noise: ArmaProcess = field(default_factory=ArmaProcess.white)
    feedback_noise_variance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node id")
        known = set(ids) | {SOURCE, DEST}
        for a, b in self.edges:
            if a not in known or b not in known:
                raise NetworkError(f"edge {a}->{b} references an unknown node")
            if b == SOURCE or a == DEST:
                raise NetworkError(f"edge {a}->{b} points into S or out of D")
        if self.source_power <= 0:
            raise NetworkError("source power must be positive")
        self.topological_order()

    @property
    def node_map(self) -> dict[str, RelayNode]:
        return {n.id: n for n in self.nodes}

    def successors(self, v: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == v)

    def topological_order(self) -> list[str]:
        indeg = {v: 0 for v in [SOURCE, DEST] + [n.id for n in self.nodes]}
        for _, b in self.edges:
            indeg[b] += 1
        ready = sorted(v for v, k in indeg.items() if k == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for b in self.successors(v):
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
            ready.sort()
        if len(order) != len(indeg):
            raise CyclicGraph("relay graph contains a cycle")
        return order

    def paths(self, start: str, end: str) -> list[list[str]]:
        out = []

        def walk(v, trail):
            if v == end:
                out.append(trail)
                return
            for b in self.successors(v):
                walk(b, trail + [b])

        walk(start, [start])
        return out

    def memory(self) -> int:
        """Largest total tap count along an S->D path."""
        nodes = self.node_map
        best = 0
        for path in self.paths(SOURCE, DEST):
            best = max(best, sum(nodes[v].filter.L for v in path[1:-1]))
        return best


def _path_response(net: RelayNetwork, path: Sequence[str]) -> np.ndarray:
    nodes = net.node_map
    poly = np.ones(1)
    for v in path[:-1]:
        if v in nodes:
            poly = np.convolve(poly, nodes[v].filter.polynomial)
    return poly


def _transfer(net: RelayNetwork, start: str, end: str) -> np.ndarray:
    """Summed path response from an injection point to the input of ``end``.

    Noise injected at a relay passes through that relay's own filter; the
    source signal does not pass through any filter before its first relay.
    """
    total = np.zeros(1)
    for path in net.paths(start, end):
        poly = _path_response(net, path)
        if poly.size > total.size:
            total = np.pad(total, (0, poly.size - total.size))
        total[: poly.size] += poly
    return total


def _sum_of_filtered(parts: list[tuple[np.ndarray, ArmaProcess]]) -> ArmaProcess:
    """Single-innovation law of sum_i T_i(D) n_i for independent ARMA n_i."""
    parts = [(t, n) for t, n in parts if np.any(t) and not n.is_zero]
    if not parts:
        return ArmaProcess.white(0.0)
    ars = [_trim(n.ar_coeffs) for _, n in parts]
    common = np.ones(1)
    for g in ars:
        common = np.convolve(common, g)
    c = np.zeros(1)
    for i, (t, n) in enumerate(parts):
        others = np.ones(1)
        for j, g in enumerate(ars):
            if j != i:
                others = np.convolve(others, g)
        ci = ma_autocovariance(np.convolve(np.convolve(t, n.ma_coeffs), others))
        if ci.size > c.size:
            c = np.pad(c, (0, ci.size - c.size))
        c[: ci.size] += ci
    return ArmaProcess(common, _trim(spectral_factorize(_trim(c, rel=1e-15)), rel=1e-14))


def reduce_to_effective_filter(net: RelayNetwork) -> tuple[FirFilter, ArmaProcess]:
    """Effective single-relay taps and the law of the relay noise reaching D."""
    if not net.paths(SOURCE, DEST):
        raise DisconnectedSource("no path from S to D")
    if (SOURCE, DEST) not in net.edges:
        raise DisconnectedSource("the model needs the direct S->D link")
    hx = _transfer(net, SOURCE, DEST)
    hx[0] -= 1.0
    taps = hx[1:] if hx.size > 1 else np.zeros(1)
    nodes = net.node_map
    parts = [(_transfer(net, v, DEST), nodes[v].noise) for v in sorted(nodes)]
    return FirFilter(taps), _sum_of_filtered(parts)


def effective_noise(net: RelayNetwork) -> ArmaProcess:
    taps, injected = reduce_to_effective_filter(net)
    return compose_from_injected(injected, net.dest_noise, taps)


def node_output_powers(net: RelayNetwork) -> dict[str, tuple[float, float]]:
    """Per-node (output power, budget) with the source sending white power rho.

    Feedback-induced correlation is ignored here; this is the relaxed
    per-node check applied on the original graph before any reduction.
    """
    rho = net.source_power
    nodes = net.node_map
    out = {}
    for v in sorted(nodes):
        parts = [(_transfer(net, SOURCE, v), ArmaProcess.white(rho))]
        parts += [(_transfer(net, u, v), nodes[u].noise) for u in sorted(nodes) if u != v]
        parts.append((np.ones(1), nodes[v].noise))
        filt = nodes[v].filter.polynomial
        power = 0.0
        for t, n in parts:
            if not np.any(t) or n.is_zero:
                continue
            power += ArmaProcess(n.ar_coeffs, np.convolve(np.convolve(filt, t), n.ma_coeffs)).autocovariance(0)[0]
        out[v] = (float(power), nodes[v].power_factor * rho)
    return out


def check_node_constraints(net: RelayNetwork, tol: float = 1e-12) -> dict[str, bool]:
    return {v: p <= b * (1 + tol) + tol for v, (p, b) in node_output_powers(net).items()}


def banded_inverse_coeffs(taps, n: int) -> np.ndarray:
    """First column a_0..a_{n-1} of H^-1: a_k + sum_i h[i] a_{k-i} = 0, a_0 = 1."""
    h = tap_array(taps)
    a = np.zeros(n)
    a[0] = 1.0
    for k in range(1, n):
        m = min(k, h.size)
        a[k] = -np.dot(h[:m], a[k - 1 :: -1][:m])
    return a


def _lower_toeplitz(col: np.ndarray) -> np.ndarray:
    return linalg.toeplitz(col, np.zeros(col.size))


@dataclass(frozen=True)
class BlockChannel:
    H: np.ndarray
    Hinv: np.ndarray
    Kw: np.ndarray
    Kz: np.ndarray
    Kz_eff: np.ndarray
    N: int
    L: int


def build_block_channel(taps, w: ArmaProcess, z: ArmaProcess, N: int) -> BlockChannel:
    taps = taps if isinstance(taps, FirFilter) else FirFilter(taps)
    L = taps.memory
    if N <= L:
        raise DimensionMismatch(f"block length {N} must exceed memory {L}")
    col = np.zeros(N)
    col[0] = 1.0
    m = min(taps.L, N - 1)
    col[1 : m + 1] = taps.taps[:m]
    H = _lower_toeplitz(col)
    Hinv = _lower_toeplitz(banded_inverse_coeffs(taps, N))
    Kw = linalg.toeplitz(w.autocovariance(N - 1))
    Kz = linalg.toeplitz(z.autocovariance(N - 1))
    if taps.is_off:
        Kz_eff = Kz.copy()
    else:
        G = np.eye(N) - Hinv
        Kz_eff = G @ Kw @ G.T + Hinv @ Kz @ Hinv.T
        Kz_eff = 0.5 * (Kz_eff + Kz_eff.T)
    return BlockChannel(H, Hinv, Kw, Kz, Kz_eff, N, L)


@dataclass(frozen=True)
class BlockSchedule:
    """Closed-loop input statistics of one block: Kx = E[x x^T], x = s + B zt."""

    Kx: np.ndarray
    B: np.ndarray


def relay_power_exact(taps, w: ArmaProcess, schedule: BlockSchedule, channel: BlockChannel | None = None,
                      denominator: int | None = None) -> float:
    """Average relay power over a block, including the x-w cross terms.

    The default denominator is N + L (message plus flush uses).
    """
    Kx = np.asarray(schedule.Kx, dtype=float)
    B = np.asarray(schedule.B, dtype=float)
    N = Kx.shape[0]
    if Kx.shape != (N, N) or B.shape != (N, N):
        raise DimensionMismatch("Kx and B must both be N x N")
    if channel is None:
        channel = build_block_channel(taps, w, ArmaProcess.white(1.0), N)
    if channel.N != N:
        raise DimensionMismatch(f"channel has N={channel.N}, schedule has N={N}")
    G = channel.H - np.eye(N)
    C = B @ (np.eye(N) - channel.Hinv) @ channel.Kw
    total = np.trace(G @ (Kx + C + C.T + channel.Kw) @ G.T)
    den = denominator if denominator is not None else N + channel.L
    return float(total / den)


_NODE_RE = re.compile(r"^node\s+([A-Za-z_][\w\-]*)\s*:\s*(.*)$")
_EDGE_RE = re.compile(r"^edge\s+([\w\-]+)\s*->\s*([\w\-]+)\s*$")
_KV_RE = re.compile(r"\s*([A-Za-z_]\w*)\s*=\s*(\[[^\]]*\]|[^,\[\]]+)\s*(?:,|$)")
_NODE_KEYS = {"taps", "sigma2", "gamma", "ar", "ma"}
_DEST_KEYS = {"sigma2", "ar", "ma"}
_GLOBAL_KEYS = {"rho", "sigma_n2"}


def _kv(body: str, allowed: set[str], where: str) -> dict[str, str]:
    out, pos = {}, 0
    while pos < len(body):
        m = _KV_RE.match(body, pos)
        if m is None:
            raise NetworkError(f"cannot parse {where}: {body[pos:]!r}")
        key = m.group(1)
        if key not in allowed:
            raise NetworkError(f"unknown key {key!r} in {where}")
        if key in out:
            raise NetworkError(f"duplicate key {key!r} in {where}")
        out[key] = m.group(2).strip()
        pos = m.end()
    return out


def _floats(text: str) -> list[float]:
    t = text.strip()
    if t.startswith("["):
        t = t[1:-1]
    return [float(x) for x in t.split(",") if x.strip()]


def _noise_from(kv: dict[str, str], where: str) -> ArmaProcess:
    if "sigma2" in kv and ("ma" in kv or "ar" in kv):
        raise NetworkError(f"{where}: give either sigma2 or ar/ma, not both")
    if "ma" in kv or "ar" in kv:
        return ArmaProcess(_floats(kv.get("ar", "[1]")), _floats(kv.get("ma", "[1]")))
    return ArmaProcess.white(float(kv.get("sigma2", "1")))


def parse_network(text: str) -> RelayNetwork:
    """Parse the plain-text network description.

    Lines: ``node r1: taps=[0.7], sigma2=1.0, gamma=1.0``, ``edge S->r1``,
    ``dest: sigma2=1``, ``rho = 1``, ``sigma_n2 = 0``.  ``#`` starts a comment.
    """
    nodes, edges, glob = [], [], {}
    dest = ArmaProcess.white(1.0)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        try:
            if m := _NODE_RE.match(line):
                kv = _kv(m.group(2), _NODE_KEYS, where)
                if "taps" not in kv:
                    raise NetworkError(f"{where}: node needs taps")
                nodes.append(RelayNode(m.group(1), FirFilter(_floats(kv["taps"])), _noise_from(kv, where),
                                       float(kv.get("gamma", "1"))))
            elif m := _EDGE_RE.match(line):
                edges.append((m.group(1), m.group(2)))
            elif line.startswith("dest") and ":" in line:
                dest = _noise_from(_kv(line.split(":", 1)[1], _DEST_KEYS, where), where)
            elif "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in _GLOBAL_KEYS:
                    raise NetworkError(f"unknown key {key!r} on {where}")
                glob[key] = float(val)
            else:
                raise NetworkError(f"cannot parse {where}: {raw!r}")
        except ValueError as exc:
            raise NetworkError(f"{where}: {exc}") from None
    return RelayNetwork(tuple(nodes), tuple(edges), glob.get("rho", 1.0), dest, glob.get("sigma_n2", 0.0))
