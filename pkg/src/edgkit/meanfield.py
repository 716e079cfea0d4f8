"""Truncated mean-field exchange dynamics.

The size density c over 0..m evolves by the quadratic exchange system,
written here in continuity-equation form: cdot = -div j with the expected
flux j(k, l-1) = K_t(k, l-1) c_k c_{l-1} over channels k = 1..m,
l-1 = 0..m-1.  Any jump that would create a size > m is zeroed, which keeps
both the mass and the first moment conserved exactly.

``integrate`` wraps an adaptive embedded Runge-Kutta scheme; ``picard_solve``
is a deliberately simple fixed-point oracle (iterated trapezoid quadrature
on contraction windows) used to cross-check the integrator.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import List, Optional

import numpy as np
from scipy.integrate import solve_ivp, cumulative_trapezoid

from .kernels import KernelSpec, Perturbation, forward_table, no_perturbation
from .metrics import ClusterDistribution, tail_l1


class StiffnessError(RuntimeError):
    pass


class StepTooLargeError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class EdgSystem:
    """Kernel + perturbation + truncation window."""

    spec: KernelSpec
    pert: Perturbation
    m: int

    def __post_init__(self):
        if self.m > self.spec.m_max:
            raise ValueError(f"window m={self.m} exceeds kernel table m_max={self.spec.m_max}")

    def rates(self, t: float) -> np.ndarray:
        return forward_table(self.spec, self.pert, t, self.m)

    @property
    def rate_bound(self) -> float:
        """Sharp constant C with K_t(k, l-1) <= C k l, uniformly in t."""
        return self.spec.linear_growth_constant * math.exp(self.pert.sup_norm)


def system(spec: KernelSpec, m: int, pert: Optional[Perturbation] = None) -> EdgSystem:
    return EdgSystem(spec, pert if pert is not None else no_perturbation(), m)


def expected_flux(sys: EdgSystem, t: float, c: np.ndarray) -> np.ndarray:
    """j(k, l-1) = K_t(k, l-1) c_k c_{l-1} on the channel grid."""
    m = sys.m
    return sys.rates(t) * c[1:m + 1, None] * c[None, 0:m]


def apply_exchange_flux(flux: np.ndarray) -> np.ndarray:
    """Minus the exchange divergence: the density increment driven by a flux."""
    m = flux.shape[0]
    rs = flux.sum(axis=1)          # outflow by donor size k = 1..m
    cs = flux.sum(axis=0)          # inflow drive by recipient size j = 0..m-1
    out = np.zeros(m + 1)
    out[0:m] += rs                 # donor drops to k-1
    out[1:m + 1] += cs             # recipient grows to j+1
    out[1:m + 1] -= rs             # donor leaves size k
    out[0:m] -= cs                 # recipient leaves size j
    return out


def edg_rhs(sys: EdgSystem, t: float, c: np.ndarray) -> np.ndarray:
    return apply_exchange_flux(expected_flux(sys, t, c))


@dataclasses.dataclass
class Trajectory:
    """Time grid, states, and the channel fluxes along them."""

    times: np.ndarray
    states: np.ndarray            # (n, m+1)
    sys: EdgSystem

    @property
    def n(self) -> int:
        return len(self.times)

    def dist(self, i: int) -> ClusterDistribution:
        return ClusterDistribution(self.states[i])

    def flux(self, i: int) -> np.ndarray:
        return expected_flux(self.sys, float(self.times[i]), self.states[i])

    def moments(self):
        k = np.arange(self.states.shape[1])
        return self.states.sum(axis=1), self.states @ k

    def moment_drift(self):
        m0, m1 = self.moments()
        return float(np.abs(m0 - m0[0]).max()), float(np.abs(m1 - m1[0]).max())

    def export_csv(self, path):
        m = self.states.shape[1] - 1
        m0, m1 = self.moments()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"c_{k}" for k in range(m + 1)] + ["mom0", "mom1"])
            for i, t in enumerate(self.times):
                wr.writerow([repr(float(t))] + [repr(float(x)) for x in self.states[i]]
                            + [repr(float(m0[i])), repr(float(m1[i]))])

    def export_flux_csv(self, path, threshold: float = 0.0):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "k", "l_minus_1", "value"])
            for i, t in enumerate(self.times):
                f = self.flux(i)
                ks, js = np.nonzero(f > threshold)
                for k, j in zip(ks, js):
                    wr.writerow([repr(float(t)), int(k) + 1, int(j), repr(float(f[k, j]))])


def _as_state(c0, m: int) -> np.ndarray:
    if isinstance(c0, ClusterDistribution):
        return c0.padded(m)
    c0 = np.asarray(c0, dtype=float)
    if len(c0) > m + 1:
        raise ValueError("initial state wider than the truncation window")
    out = np.zeros(m + 1)
    out[:len(c0)] = c0
    return out


def integrate(sys: EdgSystem, c0, t_final: float, tol: float = 1e-10,
              n_out: int = 201, method: str = "DOP853") -> Trajectory:
    """Adaptive Runge-Kutta solution on an output grid of n_out points."""
    y0 = _as_state(c0, sys.m)
    if t_final == 0.0:
        return Trajectory(np.array([0.0]), y0[None, :], sys)
    t_eval = np.linspace(0.0, t_final, n_out)
    sol = solve_ivp(lambda t, c: edg_rhs(sys, t, c), (0.0, t_final), y0,
                    method=method, rtol=tol, atol=tol * 1e-3, t_eval=t_eval)
    if not sol.success:
        raise StiffnessError(f"integration failed: {sol.message}")
    return Trajectory(sol.t, sol.y.T.copy(), sys)


# ---------------------------------------------------------------------------
# Picard fixed-point oracle
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PicardResult:
    trajectory: Trajectory
    contraction_factors: List[List[float]]   # per window, successive-iterate ratios
    window_bound: float                      # 4 C_K M_ball * t_step
    t_step: float
    iterations: List[int]

    @property
    def max_factor(self) -> float:
        flat = [r for win in self.contraction_factors for r in win]
        return max(flat) if flat else 0.0


def picard_solve(sys: EdgSystem, c0, t_final: float, m_ball: float,
                 t_step: Optional[float] = None, n_quad: int = 65,
                 tol: float = 1e-13, max_iter: int = 80) -> PicardResult:
    """Banach fixed point of c(t) = c(0) + int_0^t Q c(s) ds on short windows.

    The iteration map is a contraction in the tail-l1 distance with factor
    at most 4 C_K m_ball t_step; windows are restarted consecutively to
    cover [0, t_final].  Quadrature is composite trapezoid on a fixed fine
    grid, so the oracle is independent of the adaptive integrator.
    """
    c_k = sys.rate_bound
    if t_step is None:
        t_step = 1.0 / (8.0 * c_k * m_ball)
    bound = 4.0 * c_k * m_ball * t_step
    y = _as_state(c0, sys.m)
    if t_final == 0.0:
        traj = Trajectory(np.array([0.0]), y[None, :], sys)
        return PicardResult(traj, [], bound, t_step, [])

    all_t = [np.array([0.0])]
    all_y = [y[None, :]]
    factors: List[List[float]] = []
    iters: List[int] = []
    t0 = 0.0
    noise = 1e3 * np.finfo(float).eps
    while t0 < t_final - 1e-15:
        tau = min(t_step, t_final - t0)
        grid = t0 + np.linspace(0.0, tau, n_quad)
        cur = np.repeat(y[None, :], n_quad, axis=0)
        win_factors: List[float] = []
        prev_d = None
        it = 0
        for it in range(1, max_iter + 1):
            rhs = np.stack([edg_rhs(sys, float(grid[i]), cur[i]) for i in range(n_quad)])
            nxt = y[None, :] + cumulative_trapezoid(rhs, grid, axis=0, initial=0.0)
            d = max(tail_l1(nxt[i], cur[i]) for i in range(n_quad))
            if prev_d is not None and prev_d > noise:
                ratio = d / prev_d
                win_factors.append(ratio)
                if ratio >= 1.0:
                    raise StepTooLargeError(
                        f"contraction factor {ratio:.3f} >= 1 at window starting t={t0:.4g}; "
                        f"reduce t_step below {t_step:.4g}")
            cur = nxt
            if d < tol:
                break
            prev_d = d
        factors.append(win_factors)
        iters.append(it)
        y = cur[-1].copy()
        all_t.append(grid[1:])
        all_y.append(cur[1:])
        t0 += tau
    traj = Trajectory(np.concatenate(all_t), np.concatenate(all_y, axis=0), sys)
    return PicardResult(traj, factors, bound, t_step, iters)
