"""Cluster-size distributions and the exchange metric.

The exchange metric d_Ex(mu, nu) is the l1 distance of tail distributions
T_k = sum_{n>=k} p_n and coincides with the 1-Wasserstein distance on the
integer lattice with Euclidean ground metric.  ``w1_oracle`` computes W1
independently via the monotone (quantile) coupling and is used only to
cross-check d_ex.
"""

from __future__ import annotations

import numpy as np


class MassMismatchError(ValueError):
    pass


class ClusterDistribution:
    """Nonnegative mass vector over sizes 0..M with cached moments."""

    __slots__ = ("p", "mom0", "mom1")

    def __init__(self, p, copy: bool = True):
        p = np.array(p, dtype=float, copy=copy)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("need a 1-d size distribution")
        self.p = p
        self.mom0 = float(p.sum())
        self.mom1 = float(p @ np.arange(len(p)))

    @property
    def m(self) -> int:
        return len(self.p) - 1

    @property
    def is_normalized(self) -> bool:
        return abs(self.mom0 - 1.0) <= 1e-12

    def padded(self, m: int) -> np.ndarray:
        if m + 1 < len(self.p):
            raise ValueError("cannot shrink window")
        out = np.zeros(m + 1)
        out[:len(self.p)] = self.p
        return out

    def __repr__(self):
        return f"ClusterDistribution(m={self.m}, mom0={self.mom0:.6g}, mom1={self.mom1:.6g})"


def delta(k: int, m: int) -> ClusterDistribution:
    p = np.zeros(m + 1)
    p[k] = 1.0
    return ClusterDistribution(p, copy=False)


def common_window(mu: ClusterDistribution, nu: ClusterDistribution):
    """Re-tabulate both distributions on the larger of the two windows."""
    m = max(mu.m, nu.m)
    return mu.padded(m), nu.padded(m)


def tail(mu: ClusterDistribution) -> np.ndarray:
    """Tail vector t_k = sum_{n >= k} p_n for k = 1..M (nonincreasing)."""
    return np.cumsum(mu.p[::-1])[::-1][1:]


def d_ex(mu: ClusterDistribution, nu: ClusterDistribution) -> float:
    """Exchange distance: l1 norm of the tail difference."""
    a, b = common_window(mu, nu)
    return tail_l1(a, b)


def tail_l1(a: np.ndarray, b: np.ndarray) -> float:
    """l1 tail distance of two raw mass vectors on a common window."""
    diff = np.cumsum((a - b)[::-1])[::-1]
    return float(np.abs(diff[1:]).sum())


def dual_distance(mu: ClusterDistribution, nu: ClusterDistribution):
    """(tail-l1 value, dual value) where the dual is +inf for unequal first moments.

    The dual pairing against functions with exchange gradient bounded by one
    is d_ex/2 on matching first moments and diverges otherwise; both facts
    are returned rather than conflated.
    """
    val = d_ex(mu, nu)
    if abs(mu.mom1 - nu.mom1) > 1e-9:
        return val, np.inf
    return val, 0.5 * val


def w1_oracle(mu: ClusterDistribution, nu: ClusterDistribution) -> float:
    """1-Wasserstein distance by the monotone coupling on the line.

    Independent of the tail-sum route: mass is transported greedily between
    the sorted atoms and |i - j| is charged per unit moved.
    """
    if abs(mu.mom0 - nu.mom0) > 1e-12:
        raise MassMismatchError(f"total masses differ: {mu.mom0} vs {nu.mom0}")
    a, b = common_window(mu, nu)
    i = j = 0
    n = len(a)
    ra, rb = a[0], b[0]
    cost = 0.0
    while True:
        move = min(ra, rb)
        cost += move * abs(i - j)
        ra -= move
        rb -= move
        if ra <= 1e-17:
            i += 1
            if i >= n:
                break
            ra = a[i]
        if rb <= 1e-17:
            j += 1
            if j >= n:
                break
            rb = b[j]
    return cost


def l11_norm(mu: ClusterDistribution) -> float:
    """First-moment-weighted l1 norm: sum (1+k) |p_k|."""
    return float(np.abs(mu.p) @ (1.0 + np.arange(len(mu.p))))


def exchange_gradient(f: np.ndarray) -> np.ndarray:
    """Discrete exchange gradient on the channel grid.

    For f over sizes 0..M returns g[k-1, j] = f_{k-1} + f_{j+1} - f_k - f_j
    for channels (k = 1..M, j = 0..M-1).
    """
    f = np.asarray(f, dtype=float)
    m = len(f) - 1
    donor = (f[0:m] - f[1:m + 1])[:, None]      # f_{k-1} - f_k
    recip = (f[1:m + 1] - f[0:m])[None, :]      # f_{j+1} - f_j
    return donor + recip
