"""Equilibrium family of a reversible kernel.

The stationary weights w(0) = w(1) = 1, w(n) = prod_{k=2}^n K(1,k-1)/K(k,0)
generate the one-parameter family omega^phi(n) oc phi^n w(n) with partition
function Z(phi).  The density map rho(phi) is strictly increasing, invertible
up to the critical density rho_c = rho(phi_c), where phi_c is the radius of
convergence of Z (estimated from the tabulated range when no analytic value
is available).

Everything is computed in log space; entropies use natural log with the
0 log 0 = 0 convention.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .kernels import KernelSpec, PositivityError
from .metrics import ClusterDistribution


class SupercriticalDensityError(ValueError):
    def __init__(self, rho: float, rho_c: float):
        super().__init__(f"density {rho} exceeds critical density estimate {rho_c}")
        self.rho = rho
        self.rho_c = rho_c


@dataclasses.dataclass(frozen=True)
class WeightTable:
    """Stationary weights on sizes 0..m_max, kept in log space."""

    log_w: np.ndarray
    phi_c: float
    phi_c_is_estimate: bool

    def __post_init__(self):
        lw = np.asarray(self.log_w, dtype=float)
        object.__setattr__(self, "log_w", lw)

    @property
    def m_max(self) -> int:
        return len(self.log_w) - 1

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def lambda_c(self) -> float:
        return math.log(self.phi_c) if math.isfinite(self.phi_c) else math.inf

    def truncate(self, m: int) -> "WeightTable":
        if m > self.m_max:
            raise ValueError("cannot extend a weight table")
        return WeightTable(self.log_w[:m + 1], self.phi_c, self.phi_c_is_estimate)


def weights(spec: KernelSpec) -> WeightTable:
    """Weight table of a kernel, computed as a log-space product."""
    M = spec.m_max
    T = spec.table
    num = T[1, 0:M]            # K(1, n-1) for n = 1..M
    den = T[np.arange(1, M + 1), 0]   # K(n, 0)
    if np.any(num <= 0) or np.any(den <= 0):
        raise PositivityError("weights need K(1, n-1) > 0 and K(n, 0) > 0 on the table")
    inc = np.log(num) - np.log(den)   # increment for n >= 2 is inc[n-1]
    log_w = np.zeros(M + 1)
    log_w[2:] = np.cumsum(inc[1:])
    if spec.phi_c is not None:
        return WeightTable(log_w, float(spec.phi_c), False)
    # ratio estimate at the largest tabulated size: w(M-1)/w(M) -> phi_c
    return WeightTable(log_w, float(math.exp(log_w[M - 1] - log_w[M])), True)


def weight_table_from_values(w, phi_c: Optional[float] = None) -> WeightTable:
    """Table from raw positive weights (no w(0)=w(1)=1 normalization required)."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise PositivityError("weights must be positive")
    log_w = np.log(w)
    if phi_c is not None:
        return WeightTable(log_w, float(phi_c), False)
    return WeightTable(log_w, float(math.exp(log_w[-2] - log_w[-1])), True)


# ---------------------------------------------------------------------------
# partition function and density map
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class PartitionValue:
    value: float
    log_value: float
    tail_bound: float     # estimated truncation tail when the end ratio is < 1


def _log_terms(wt: WeightTable, phi: float) -> np.ndarray:
    n = np.arange(len(wt.log_w), dtype=float)
    if phi == 0.0:
        out = np.full(len(n), -np.inf)
        out[0] = wt.log_w[0]
        return out
    return n * math.log(phi) + wt.log_w


def partition_function(wt: WeightTable, phi: float) -> PartitionValue:
    """Truncated Z(phi) = sum phi^n w(n) with a geometric tail estimate."""
    if phi < 0:
        raise ValueError("fugacity must be nonnegative")
    lt = _log_terms(wt, phi)
    if lt.max() > 700.0:
        raise OverflowError(f"fugacity {phi} overflows the partition sum")
    log_z = float(logsumexp(lt))
    M = wt.m_max
    r = math.exp(lt[M] - lt[M - 1]) if phi > 0 else 0.0
    tail = math.exp(lt[M]) * r / (1.0 - r) if r < 1.0 else math.inf
    return PartitionValue(math.exp(log_z), log_z, tail)


def density_of_fugacity(wt: WeightTable, phi: float) -> float:
    """First moment rho(phi) of omega^phi on the table."""
    lt = _log_terms(wt, phi)
    log_z = logsumexp(lt)
    t = np.exp(lt - log_z)
    return float(t @ np.arange(len(t)))


def rho_c_estimate(wt: WeightTable) -> float:
    """Critical density: rho at the critical fugacity (table estimate)."""
    if not math.isfinite(wt.phi_c):
        return math.inf
    return density_of_fugacity(wt, wt.phi_c)


def fugacity_of_density(wt: WeightTable, rho: float, tol: float = 1e-10) -> float:
    """Invert the monotone density map by bisection to |rho(Phi) - rho| <= tol."""
    if rho < 0:
        raise ValueError("density must be nonnegative")
    if rho == 0.0:
        return 0.0
    rc = rho_c_estimate(wt)
    if rho > rc:
        raise SupercriticalDensityError(rho, rc)
    lo, hi = 0.0, wt.phi_c
    if not math.isfinite(hi):
        hi = 1.0
        while density_of_fugacity(wt, hi) < rho:
            hi *= 2.0
            if hi > 1e280:
                raise SupercriticalDensityError(rho, rc)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        r = density_of_fugacity(wt, mid)
        if abs(r - rho) <= tol:
            return mid
        if r < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclasses.dataclass(frozen=True)
class EquilibriumMeasure:
    dist: ClusterDistribution
    phi: float
    rho: float
    log_p: np.ndarray


def equilibrium_measure(wt: WeightTable, rho: Optional[float] = None,
                        phi: Optional[float] = None, tol: float = 1e-10) -> EquilibriumMeasure:
    """omega^phi (or omega^rho via the inverse density map), log-space exact."""
    if (rho is None) == (phi is None):
        raise ValueError("specify exactly one of rho, phi")
    if phi is None:
        phi = fugacity_of_density(wt, rho, tol)
    lt = _log_terms(wt, phi)
    log_p = lt - logsumexp(lt)
    dist = ClusterDistribution(np.exp(log_p), copy=False)
    return EquilibriumMeasure(dist, phi, dist.mom1, log_p)


# ---------------------------------------------------------------------------
# tilted measures for arbitrary weight sequences (exponential family in the
# first moment); used by the finite-system entropy-scaling tables
# ---------------------------------------------------------------------------

def log_partition_tilt(log_w: np.ndarray, lam: float) -> float:
    n = np.arange(len(log_w), dtype=float)
    return float(logsumexp(n * lam + log_w))


def moment_of_tilt(log_w: np.ndarray, lam: float) -> float:
    n = np.arange(len(log_w), dtype=float)
    lt = n * lam + log_w
    return float(np.exp(lt - logsumexp(lt)) @ n)


def tilt_of_moment(log_w: np.ndarray, rho: float, tol: float = 1e-12) -> float:
    """Unique lambda with Mom(omega^lambda) = rho, by bisection."""
    lo, hi = -1.0, 1.0
    while moment_of_tilt(log_w, lo) > rho:
        lo *= 2.0
        if lo < -1e6:
            raise ValueError("moment target below achievable range")
    while moment_of_tilt(log_w, hi) < rho:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("moment target above achievable range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if moment_of_tilt(log_w, mid) < rho:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def tilted_measure(log_w: np.ndarray, rho: float) -> np.ndarray:
    lam = tilt_of_moment(np.asarray(log_w, dtype=float), rho)
    n = np.arange(len(log_w), dtype=float)
    lt = n * lam + log_w
    return np.exp(lt - logsumexp(lt))


# ---------------------------------------------------------------------------
# limit rate function
# ---------------------------------------------------------------------------

def relative_entropy(p: np.ndarray, log_q: np.ndarray) -> float:
    """sum p log(p/q) with 0 log 0 = 0; +inf off the support of q."""
    p = np.asarray(p, dtype=float)
    mask = p > 0.0
    if np.any(~np.isfinite(log_q[mask])):
        return math.inf
    pm = p[mask]
    return float(pm @ (np.log(pm) - log_q[mask]))


def gamma_rate_function(wt: WeightTable, c: ClusterDistribution, rho: float) -> float:
    """Limit rate of the normalized Gibbs entropies at density rho.

    Case split: +inf if Mom(c) > rho or c is not absolutely continuous with
    respect to w; for rho <= rho_c the value is Ent(c | omega^rho) plus the
    condensation penalty (lambda_c - lambda(rho)) * (rho - Mom(c)) with the
    convention (+inf) * 0 = 0; for rho > rho_c it is Ent(c | omega^{rho_c}).
    """
    if not c.is_normalized:
        raise ValueError("c must be normalized")
    mom = c.mom1
    if mom > rho + 1e-12:
        return math.inf
    p = c.padded(wt.m_max) if c.m <= wt.m_max else c.p
    if c.m > wt.m_max:
        raise ValueError("distribution window exceeds the weight table")
    if np.any(p[~np.isfinite(wt.log_w)] > 0):
        return math.inf
    rc = rho_c_estimate(wt)
    r_eff = min(rho, rc)
    if r_eff == 0.0:
        ent = 0.0 if p[0] >= 1.0 - 1e-12 else math.inf
    else:
        em = equilibrium_measure(wt, rho=r_eff)
        ent = relative_entropy(p, em.log_p)
    if rho <= rc:
        defect = max(rho - mom, 0.0)
        lam_rho = -math.inf if rho == 0.0 else math.log(fugacity_of_density(wt, rho))
        gap = wt.lambda_c - lam_rho
        if math.isinf(gap):
            term = 0.0 if defect <= 1e-12 else math.inf
        else:
            term = gap * defect
    else:
        term = 0.0
    return ent + term
