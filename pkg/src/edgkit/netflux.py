"""Net-flux dissipation and its contraction to one-way fluxes.

Per channel with reference weight theta > 0 and signed net flux j_net, the
minimum of the one-way pair dissipation phi(j | theta) + phi(j_dag | theta)
over fluxes j, j_dag >= 0 with (j - j_dag)/2 = j_net is attained at

    j = theta (sqrt(h^2 + 1) + h),   j_dag = theta / g = j - 2 j_net,

with h = j_net / theta, and equals theta psi(2h), where psi is the Legendre
transform of psi*(s) = e^s + e^{-s} - 2:

    psi(r) = r asinh(r/2) - 2 (sqrt(1 + r^2/4) - 1).

``r_net`` returns sum theta psi(2h) / 2 per channel (one half of the pair
minimum); ``contraction_oracle`` re-derives the minimum numerically by
golden-section search and reports the worst-channel gap against the closed
form.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .variational import phi_perspective


GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclasses.dataclass(frozen=True)
class NetFluxProblem:
    """Per-channel reference weights theta >= 0 and signed net fluxes."""

    theta: np.ndarray
    j_net: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        jn = np.asarray(self.j_net, dtype=float)
        if th.shape != jn.shape:
            raise ValueError("theta and j_net must have the same shape")
        if np.any(th < 0):
            raise ValueError("theta must be nonnegative")
        object.__setattr__(self, "theta", th.ravel())
        object.__setattr__(self, "j_net", jn.ravel())

    @property
    def n_channels(self) -> int:
        return len(self.theta)


def psi(r):
    """Legendre transform of e^s + e^{-s} - 2; even, psi(0) = 0."""
    r = np.asarray(r, dtype=float)
    return r * np.arcsinh(r / 2.0) - 2.0 * (np.sqrt(1.0 + r * r / 4.0) - 1.0)


def r_net(problem: NetFluxProblem) -> float:
    """sum_ch theta psi(2 j_net / theta) / 2; +inf if a null channel carries net flux."""
    th = problem.theta
    jn = problem.j_net
    null = th == 0.0
    if np.any(jn[null] != 0.0):
        return math.inf
    h = np.zeros_like(th)
    act = ~null
    h[act] = jn[act] / th[act]
    return float(0.5 * np.sum(th[act] * psi(2.0 * h[act])))


def optimal_oneway(problem: NetFluxProblem):
    """Closed-form minimizing one-way fluxes (j, j_dag) with (j - j_dag)/2 = j_net."""
    th = problem.theta
    jn = problem.j_net
    j = np.zeros_like(th)
    jd = np.zeros_like(th)
    act = th > 0.0
    h = jn[act] / th[act]
    g = np.sqrt(h * h + 1.0) + h
    j[act] = th[act] * g
    jd[act] = th[act] / g
    return j, jd


def oneway_dissipation(problem: NetFluxProblem, j, j_dag) -> float:
    """sum_ch [phi(j | theta) + phi(j_dag | theta)] over both flux directions."""
    th = problem.theta
    return float(sum(phi_perspective(float(a), float(t)) + phi_perspective(float(b), float(t))
                     for a, b, t in zip(np.asarray(j), np.asarray(j_dag), th)))


def _golden_min(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return f(0.5 * (a + b))


def contraction_oracle(problem: NetFluxProblem, tol: float = 1e-12) -> float:
    """Worst-channel gap between the numerical one-way minimum and 2 r_net.

    Per channel the pair dissipation phi(j|theta) + phi(j - 2 j_net|theta)
    is minimized over j >= max(0, 2 j_net) by golden-section search; the
    closed form predicts theta psi(2h).
    """
    gap = 0.0
    for th, jn in zip(problem.theta, problem.j_net):
        if th == 0.0:
            if jn != 0.0:
                raise ValueError("null channel carries net flux")
            continue
        h = jn / th
        closed = th * float(psi(2.0 * h))

        def pair(j, th=th, jn=jn):
            return phi_perspective(j, th) + phi_perspective(j - 2.0 * jn, th)

        lo = max(0.0, 2.0 * jn)
        hi = th * (abs(h) + math.sqrt(h * h + 1.0)) + 2.0 * abs(jn) + th + 1.0
        numeric = _golden_min(pair, lo, hi, tol * max(1.0, hi))
        gap = max(gap, abs(numeric - closed))
    return gap
