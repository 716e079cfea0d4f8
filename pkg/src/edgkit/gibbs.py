"""Exact machinery for small particle systems.

States of N particles in L clusters are integer count vectors over sizes
0..N (partitions of N into at most L parts).  On the enumerated space this
module builds the multinomial Gibbs measure, checks lifted detailed
balance, integrates the master equation exactly, evaluates the finite
energy-dissipation functional, verifies the two counting estimates behind
the entropy normalization, tabulates the normalized-entropy convergence to
its limit, and projects densities onto the state lattice in the
first-moment-weighted l1 norm.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import gammaln, logsumexp

from .equilibrium import relative_entropy, tilted_measure, moment_of_tilt
from .kernels import KernelSpec, Perturbation, no_perturbation
from .meanfield import StiffnessError
from .metrics import ClusterDistribution
from .particle import MicroState
from .variational import FunctionalReport, entropy_dissipation, trapz_with_error


class EnumerationBudgetError(ValueError):
    pass


class SupportError(ValueError):
    pass


class InfeasibleProjectionError(ValueError):
    def __init__(self, distance: float, bound: float):
        super().__init__(f"nearest lattice state at distance {distance:.4g} "
                         f"exceeds the construction bound {bound:.4g}")
        self.distance = distance
        self.bound = bound


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------

def count_partitions(n: int, max_parts: int) -> int:
    """Number of partitions of n into at most max_parts parts (exact DP)."""
    if n == 0:
        return 1
    # at most L parts == largest part at most L, by conjugation
    dp = [1] + [0] * n
    for part in range(1, min(max_parts, n) + 1):
        for j in range(part, n + 1):
            dp[j] += dp[j - part]
    return dp[n]


def _partitions(remaining: int, max_part: int, max_parts: int):
    if remaining == 0:
        yield []
        return
    if max_parts == 0:
        return
    for p in range(min(max_part, remaining), 0, -1):
        for rest in _partitions(remaining - p, p, max_parts - 1):
            yield [p] + rest


@dataclasses.dataclass
class EdgeSet:
    src: np.ndarray
    k: np.ndarray
    lm1: np.ndarray
    dst: np.ndarray
    flip: np.ndarray     # index of the reverse edge (dst, lm1+1, k-1)

    def __len__(self):
        return len(self.src)


@dataclasses.dataclass
class StateSpace:
    """Enumerated count vectors in lexicographic order, plus the jump graph."""

    n_particles: int
    n_clusters: int
    counts: np.ndarray            # (n_states, N+1) int64
    index: dict
    _edges: Optional[EdgeSet] = None

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    def state(self, i: int) -> MicroState:
        return MicroState(self.counts[i])

    def locate(self, counts) -> int:
        return self.index[tuple(int(x) for x in counts)]

    def edges(self) -> EdgeSet:
        if self._edges is None:
            self._edges = _build_edges(self)
        return self._edges


def enumerate_states(n_particles: int, n_clusters: int,
                     budget: int = 10 ** 6) -> StateSpace:
    """All occupation count vectors with the given particle and cluster numbers."""
    N, L = n_particles, n_clusters
    if N < 1 or L < 1:
        raise ValueError("need N >= 1 and L >= 1")
    size = count_partitions(N, L)
    if size > budget:
        raise EnumerationBudgetError(f"{size} states exceed budget {budget}")
    rows = np.zeros((size, N + 1), dtype=np.int64)
    for i, parts in enumerate(_partitions(N, N, L)):
        row = np.zeros(N + 1, dtype=np.int64)
        for p in parts:
            row[p] += 1
        row[0] = L - len(parts)
        rows[i] = row
    order = np.lexsort(rows.T[::-1])      # lexicographic on count vectors
    rows = rows[order]
    index = {tuple(int(x) for x in rows[i]): i for i in range(size)}
    return StateSpace(N, L, rows, index)


def _build_edges(space: StateSpace) -> EdgeSet:
    N = space.n_particles
    src: List[int] = []
    kk: List[int] = []
    jj: List[int] = []
    dst: List[int] = []
    for s in range(space.n_states):
        n = space.counts[s]
        occ = np.nonzero(n)[0]
        donors = occ[occ >= 1]
        for k in donors:
            for j in occ:
                if j + 1 > N:
                    continue
                if n[j] - (1 if j == k else 0) < 1:
                    continue
                tgt = n.copy()
                tgt[k] -= 1
                tgt[j] -= 1
                tgt[k - 1] += 1
                tgt[j + 1] += 1
                src.append(s)
                kk.append(int(k))
                jj.append(int(j))
                dst.append(space.index[tuple(int(x) for x in tgt)])
    src_a = np.array(src, dtype=np.int64)
    k_a = np.array(kk, dtype=np.int64)
    j_a = np.array(jj, dtype=np.int64)
    dst_a = np.array(dst, dtype=np.int64)
    lookup = {(int(src_a[e]), int(k_a[e]), int(j_a[e])): e for e in range(len(src_a))}
    flip = np.array([lookup[(int(dst_a[e]), int(j_a[e]) + 1, int(k_a[e]) - 1)]
                     for e in range(len(src_a))], dtype=np.int64)
    return EdgeSet(src_a, k_a, j_a, dst_a, flip)


# ---------------------------------------------------------------------------
# Gibbs measure
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GibbsMeasure:
    """Pushforward of the product measure with the given weights."""

    log_pi: np.ndarray
    log_z: float                  # log of the labelled partition function
    log_w: np.ndarray
    n_clusters: int

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def a_nl(self) -> float:
        """Free-energy density (1/L) log Z."""
        return self.log_z / self.n_clusters


def gibbs_measure(space: StateSpace, w) -> GibbsMeasure:
    """Multinomial-weighted measure Pi(c) oc L!/prod (c_k L)! prod w(k)^{c_k L}."""
    w = np.asarray(w, dtype=float)
    if len(w) < space.n_particles + 1:
        raise ValueError("weights must cover sizes 0..N")
    w = w[:space.n_particles + 1]
    occupied = space.counts.sum(axis=0) > 0
    if np.any(w[occupied] <= 0):
        raise SupportError("zero weight on an occupied size")
    log_w = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), -np.inf)
    L = space.n_clusters
    log_mult = gammaln(L + 1) - gammaln(space.counts + 1).sum(axis=1)
    log_unnorm = log_mult + space.counts @ np.where(np.isfinite(log_w), log_w, 0.0)
    log_z = float(logsumexp(log_unnorm))
    return GibbsMeasure(log_unnorm - log_z, log_z, log_w, L)


# ---------------------------------------------------------------------------
# rates on edges
# ---------------------------------------------------------------------------

def _edge_tilt(pert: Perturbation, t: float, e: EdgeSet) -> np.ndarray:
    if pert.is_zero:
        return np.ones(len(e))
    return np.exp(np.asarray(pert(t, e.k, e.lm1), dtype=float))


def _structural(space: StateSpace, e: EdgeSet) -> np.ndarray:
    """n_k (n_{l-1} - delta_{k,l-1}) per edge."""
    n_src = space.counts[e.src]
    nk = n_src[np.arange(len(e)), e.k]
    nj = n_src[np.arange(len(e)), e.lm1]
    return (nk * (nj - (e.k == e.lm1))).astype(float)


def _kappa_l_base(space: StateSpace, spec: KernelSpec, e: EdgeSet) -> np.ndarray:
    """kappa^L with the unperturbed kernel: n_k (n_j - d) Kbar(k, j) / (L (L-1))."""
    L = space.n_clusters
    kb = spec.table[e.k, e.lm1]
    return _structural(space, e) * kb / (L * (L - 1.0))


def lifted_dbc_check(space: StateSpace, gm: GibbsMeasure, spec: KernelSpec,
                     pert: Optional[Perturbation] = None, t: float = 0.0) -> float:
    """Max relative detailed-balance residual with the forward kernel on both sides.

    Zero (to rounding) exactly when the chain is reversible; a flip-asymmetric
    perturbation produces a strictly positive residual.
    """
    pert = pert or no_perturbation()
    e = space.edges()
    lhs = np.exp(gm.log_pi[e.src]) * _kappa_l_base(space, spec, e) * _edge_tilt(pert, t, e)
    rhs = lhs[e.flip]
    return float(np.max(np.abs(lhs - rhs) / (lhs + rhs + 1e-300)))


def lifted_skew_check(space: StateSpace, gm: GibbsMeasure, spec: KernelSpec,
                      pert: Optional[Perturbation] = None, t: float = 0.0) -> float:
    """Max relative residual of Pi(c) kappa^L = Pi(c') kappa^{L,dag} at the flip.

    This identity defines the backward kernel and holds for every bounded
    tilt, reversible or not.
    """
    pert = pert or no_perturbation()
    e = space.edges()
    tilt = _edge_tilt(pert, t, e)
    lhs = np.exp(gm.log_pi[e.src]) * _kappa_l_base(space, spec, e) * tilt
    # backward rate through the flipped edge keeps the forward channel's tilt
    struct_flip = _structural(space, e)[e.flip]
    kb_flip = spec.table[e.lm1 + 1, e.k - 1]
    L = space.n_clusters
    rhs = np.exp(gm.log_pi[e.dst]) * struct_flip * kb_flip * tilt / (L * (L - 1.0))
    return float(np.max(np.abs(lhs - rhs) / (lhs + rhs + 1e-300)))


# ---------------------------------------------------------------------------
# master equation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MasterTrajectory:
    times: np.ndarray
    probs: np.ndarray             # (n_out, n_states)
    space: StateSpace
    spec: KernelSpec
    pert: Perturbation

    @property
    def n(self) -> int:
        return len(self.times)

    def edge_flux(self, i: int) -> np.ndarray:
        """Reference flux nu^L = kappa^L[c] C(c) per edge at output i."""
        e = self.space.edges()
        base = _kappa_l_base(self.space, self.spec, e)
        return base * _edge_tilt(self.pert, float(self.times[i]), e) * self.probs[i][e.src]


def generator_matrix(space: StateSpace, spec: KernelSpec,
                     pert: Optional[Perturbation] = None, t: float = 0.0) -> np.ndarray:
    """Dense generator G with dC/dt = G C; columns sum to zero."""
    pert = pert or no_perturbation()
    e = space.edges()
    rate = space.n_clusters * _kappa_l_base(space, spec, e) * _edge_tilt(pert, t, e)
    S = space.n_states
    G = np.zeros((S, S))
    np.add.at(G, (e.dst, e.src), rate)
    np.add.at(G, (e.src, e.src), -rate)
    return G


def solve_fke(space: StateSpace, spec: KernelSpec, pert: Optional[Perturbation],
              c0: np.ndarray, t_final: float, tol: float = 1e-10,
              n_out: int = 201) -> MasterTrajectory:
    """Integrate the master equation on the enumerated space."""
    pert = pert or no_perturbation()
    c0 = np.asarray(c0, dtype=float)
    if c0.shape != (space.n_states,) or abs(c0.sum() - 1.0) > 1e-9 or np.any(c0 < -1e-12):
        raise ValueError("c0 must be a probability vector on the state space")
    e = space.edges()
    base = space.n_clusters * _kappa_l_base(space, spec, e)
    S = space.n_states

    def rhs(t, C):
        flow = base * _edge_tilt(pert, t, e) * C[e.src]
        return (np.bincount(e.dst, weights=flow, minlength=S)
                - np.bincount(e.src, weights=flow, minlength=S))

    if t_final == 0.0:
        return MasterTrajectory(np.array([0.0]), c0[None, :], space, spec, pert)
    sol = solve_ivp(rhs, (0.0, t_final), c0, method="DOP853", rtol=tol,
                    atol=tol * 1e-3, t_eval=np.linspace(0.0, t_final, n_out))
    if not sol.success:
        raise StiffnessError(sol.message)
    return MasterTrajectory(sol.t, sol.y.T.copy(), space, spec, pert)


# ---------------------------------------------------------------------------
# finite energy-dissipation functional
# ---------------------------------------------------------------------------

def finite_edf(space: StateSpace, gm: GibbsMeasure, spec: KernelSpec,
               pert: Optional[Perturbation], mtraj: MasterTrajectory,
               fluxes: Optional[Sequence[np.ndarray]] = None,
               check_continuity: bool = True, ce_tol: float = 1e-4) -> FunctionalReport:
    """E(C_T) - E(C_0) + int (R + D) dt for the finite system.

    E = (1/2L) Ent(C | Pi); R = Ent(J | Theta) with Theta the geometric mean
    of the forward edge flux and the flipped backward flux; D is the
    corresponding Fisher term.  ``fluxes`` defaults to nu^L[C_t].
    """
    pert = pert or no_perturbation()
    e = space.edges()
    L = space.n_clusters
    base = _kappa_l_base(space, spec, e)
    kb_flip = spec.table[e.lm1 + 1, e.k - 1]
    struct_flip = _structural(space, e)[e.flip]
    base_rev = struct_flip * kb_flip / (L * (L - 1.0))

    n = mtraj.n
    r_vals = np.empty(n)
    d_vals = np.empty(n)
    e_vals = np.empty(n)
    fl: List[np.ndarray] = []
    for i in range(n):
        t = float(mtraj.times[i])
        C = mtraj.probs[i]
        tilt = _edge_tilt(pert, t, e)
        nu = base * tilt * C[e.src]
        nu_rev = base_rev * tilt * C[e.dst]
        J = nu if fluxes is None else np.asarray(fluxes[i], dtype=float)
        fl.append(J)
        theta_e = np.sqrt(nu * nu_rev)
        r_vals[i] = entropy_dissipation(J, theta_e)
        d_vals[i] = float(np.sum(nu - theta_e))
        mask = C > 0
        if np.any(~np.isfinite(gm.log_pi[mask])):
            e_vals[i] = math.inf
        else:
            e_vals[i] = float(C[mask] @ (np.log(C[mask]) - gm.log_pi[mask])) / (2 * L)

    ce_res = 0.0
    for i in range(n - 1):
        dt = float(mtraj.times[i + 1] - mtraj.times[i])
        dC_i = L * (np.bincount(e.dst, weights=fl[i], minlength=space.n_states)
                    - np.bincount(e.src, weights=fl[i], minlength=space.n_states))
        dC_j = L * (np.bincount(e.dst, weights=fl[i + 1], minlength=space.n_states)
                    - np.bincount(e.src, weights=fl[i + 1], minlength=space.n_states))
        step = mtraj.probs[i + 1] - mtraj.probs[i] - 0.5 * dt * (dC_i + dC_j)
        ce_res = max(ce_res, float(np.abs(step).sum()))
    if check_continuity and ce_res > ce_tol:
        raise ValueError(f"flux-continuity defect {ce_res:.3e} exceeds {ce_tol:.3e}")

    r_int, r_err = trapz_with_error(r_vals, mtraj.times)
    d_int, d_err = trapz_with_error(d_vals, mtraj.times)
    return FunctionalReport(e_vals[0], e_vals[-1], r_int, d_int,
                            e_vals[-1] - e_vals[0] + r_int + d_int,
                            r_err + d_err, ce_res)


def flip_involution_defect(space: StateSpace) -> int:
    """Number of edges on which flipping twice fails to return the edge."""
    e = space.edges()
    return int(np.sum(e.flip[e.flip] != np.arange(len(e))))


def edge_flux_bounds(space: StateSpace, gm_or_probs, spec: KernelSpec,
                     pert: Optional[Perturbation] = None, t: float = 0.0):
    """(sum nu, sum flipped nu-dagger) for a probability vector on states."""
    pert = pert or no_perturbation()
    C = gm_or_probs.pi if isinstance(gm_or_probs, GibbsMeasure) else np.asarray(gm_or_probs)
    e = space.edges()
    tilt = _edge_tilt(pert, t, e)
    nu = _kappa_l_base(space, spec, e) * tilt * C[e.src]
    L = space.n_clusters
    kb_flip = spec.table[e.lm1 + 1, e.k - 1]
    nu_rev = _structural(space, e)[e.flip] * kb_flip * tilt * C[e.dst] / (L * (L - 1.0))
    return float(nu.sum()), float(nu_rev.sum())


# ---------------------------------------------------------------------------
# counting estimates and entropy decomposition
# ---------------------------------------------------------------------------

def counting_lhs(space: StateSpace) -> np.ndarray:
    """|log L! - sum log (c_k L)! + L sum c_k log c_k| per state."""
    L = space.n_clusters
    counts = space.counts
    log_fact = gammaln(L + 1) - gammaln(counts + 1).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        clogc = np.where(counts > 0, counts * np.log(counts / L), 0.0).sum(axis=1)
    return np.abs(log_fact + clogc)


def counting_bound(n_particles: int, n_clusters: int) -> float:
    return (math.sqrt(2 * n_particles) + 1.0) * (1.0 + math.log(n_clusters))


@dataclasses.dataclass(frozen=True)
class CountingReport:
    n_particles: int
    n_clusters: int
    n_states: int
    max_lhs: float
    bound: float

    @property
    def max_ratio(self) -> float:
        return self.max_lhs / self.bound


def counting_inequality(space: StateSpace) -> CountingReport:
    """Factorial-versus-entropy bound checked on every enumerated state."""
    lhs = counting_lhs(space)
    return CountingReport(space.n_particles, space.n_clusters, space.n_states,
                          float(lhs.max()),
                          counting_bound(space.n_particles, space.n_clusters))


def entropy_decomposition_check(space: StateSpace, gm: GibbsMeasure,
                                C: np.ndarray) -> Tuple[float, float]:
    """Residual of (1/L) Ent(C|Pi) = int J(c) C(dc) + (1/L) log Z, with certificate.

    J(c) = sum_k c_k log(c_k / w_k).  The certified bound combines the
    entropy of C with the per-state counting estimate; the residual is
    O(L^{-1/2} log L) along N/L -> rho schedules.
    """
    C = np.asarray(C, dtype=float)
    L = space.n_clusters
    mask = C > 0
    if np.any(~np.isfinite(gm.log_pi[mask])):
        return math.inf, math.inf
    lhs = float(C[mask] @ (np.log(C[mask]) - gm.log_pi[mask])) / L
    frac = space.counts / L
    with np.errstate(divide="ignore", invalid="ignore"):
        clogc = np.where(frac > 0, frac * np.log(frac), 0.0)
    j_vals = (clogc - frac * np.where(np.isfinite(gm.log_w), gm.log_w, 0.0)).sum(axis=1)
    if np.any((space.counts[:, ~np.isfinite(gm.log_w)] > 0) & mask[:, None]):
        return math.inf, math.inf
    rhs = float(C @ j_vals) + gm.a_nl
    ent_c = float(-C[mask] @ np.log(C[mask]))
    cert = ent_c / L + float(C @ counting_lhs(space)) / L
    return abs(lhs - rhs), cert


# ---------------------------------------------------------------------------
# normalized-entropy convergence tables
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GammaRow:
    n_particles: int
    n_clusters: int
    ent_rate: float               # (1/L) Ent(Pi_tilde | Pi)
    limit: float
    gap: float
    a_nl: float
    a_limit: float


def gamma_table(omega_tilde, omega, rho: float, schedule: Sequence[int],
                window: int = 512, budget: int = 10 ** 6) -> List[GammaRow]:
    """Normalized relative entropies of two Gibbs families along N/L -> rho.

    ``omega_tilde`` and ``omega`` are weight sequences (callables on sizes or
    arrays covering 0..window).  Rows are exact enumerations at N = rho * L
    for L in the schedule; the limit column is Ent(tilde at rho^, base at rho^)
    with rho^ = min(rho, rho_c estimate), computed on the reference window.
    """
    sizes = np.arange(window + 1)
    wt = np.asarray(omega_tilde(sizes), dtype=float) if callable(omega_tilde) \
        else np.asarray(omega_tilde, dtype=float)
    wb = np.asarray(omega(sizes), dtype=float) if callable(omega) \
        else np.asarray(omega, dtype=float)
    if np.any(wt <= 0) or np.any(wb <= 0):
        raise SupportError("weight sequences must be positive for the table")
    if not np.all(np.isfinite(np.log(wt / wb))):
        raise ValueError("log-ratio of the weight sequences must be bounded")
    log_wb = np.log(wb)
    lam_c = float(log_wb[-2] - log_wb[-1])
    rho_c = moment_of_tilt(log_wb, lam_c)
    r_eff = min(rho, rho_c)
    tilde_eq = tilted_measure(np.log(wt), r_eff)
    base_eq = tilted_measure(log_wb, r_eff)
    limit = relative_entropy(tilde_eq, np.log(base_eq))
    a_limit = -(relative_entropy(base_eq, log_wb) + lam_c * max(rho - rho_c, 0.0))

    rows = []
    for L in schedule:
        N = int(round(rho * L))
        space = enumerate_states(N, L, budget)
        gm_t = gibbs_measure(space, wt[:N + 1])
        gm_b = gibbs_measure(space, wb[:N + 1])
        pi_t = gm_t.pi
        ent = float(pi_t @ (gm_t.log_pi - gm_b.log_pi)) / L
        rows.append(GammaRow(N, L, ent, limit, abs(ent - limit), gm_b.a_nl, a_limit))
    return rows


# ---------------------------------------------------------------------------
# lattice projection and explicit construction
# ---------------------------------------------------------------------------

def recovery_construct(c: ClusterDistribution, n_particles: int,
                       n_clusters: int) -> MicroState:
    """Explicit lattice approximation: floor counts plus one correction atom.

    Sizes k >= 1 receive floor(L c_k) clusters, the remainder sits at size
    0, and the particle deficit is patched by moving one empty cluster to
    the deficit size (or trimming the largest cluster on surplus).
    """
    N, L = n_particles, n_clusters
    width = max(c.m, N) + 1
    counts = np.zeros(width, dtype=np.int64)
    counts[1:c.m + 1] = np.floor(L * c.p[1:]).astype(np.int64)
    if counts.sum() > L:
        raise ValueError("floor counts exceed the cluster budget")
    counts[0] = L - counts[1:].sum()
    d = N - int(counts @ np.arange(width))
    while d < 0:
        k = int(np.nonzero(counts[1:])[0].max()) + 1
        k_new = max(k + d, 0)
        counts[k] -= 1
        counts[k_new] += 1
        d -= k_new - k
    if d > 0:
        if d > width - 1:
            raise ValueError("correction atom exceeds the window")
        if counts[0] == 0:
            k = int(np.nonzero(counts[1:])[0].min()) + 1
            counts[k] -= 1
            counts[0] += 1
            d += k
        counts[0] -= 1
        counts[d] += 1
    return MicroState(counts)


def recovery_project(c: ClusterDistribution, n_particles: int, n_clusters: int,
                     budget: int = 10 ** 6,
                     check_bound: bool = False) -> Tuple[MicroState, float]:
    """Nearest state in the first-moment-weighted l1 norm, ties broken
    lexicographically (the enumeration order makes argmin deterministic)."""
    N, L = n_particles, n_clusters
    space = enumerate_states(N, L, budget)
    width = max(c.m, N) + 1
    target = np.zeros(width)
    target[:c.m + 1] = c.p
    lattice = np.zeros((space.n_states, width))
    lattice[:, :N + 1] = space.counts / L
    wgt = 1.0 + np.arange(width)
    dist = np.abs(lattice - target[None, :]) @ wgt
    best = int(np.argmin(dist))
    d_best = float(dist[best])
    if check_bound:
        supp = np.nonzero(c.p)[0]
        m_sup = int(supp.max()) if len(supp) else 0
        eps = max(abs(N / L - c.mom1), 0.5 * m_sup * (m_sup + 1) / L)
        bound = 15.0 * max(eps, 1e-12)
        if d_best > bound:
            raise InfeasibleProjectionError(d_best, bound)
    return MicroState(space.counts[best]), d_best
