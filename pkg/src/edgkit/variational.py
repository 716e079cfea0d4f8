"""Mean-field energy-dissipation machinery.

Building blocks: the convex pair phi(x) = x log x - x + 1, phi*(r) = e^r - 1,
the perspective phi(a|b), and the extended functions A(u,v) = log v - log u,
B(u,v,w) = A(u,v) w under explicit infinity conventions (|+-inf| = +inf,
0 * (+-inf) = 0).  On top of these sit the relative-entropy energy,
the entropic dissipation R = Ent(j | theta), the Fisher-type dissipation
D = sum (kappa - sqrt(kappa kappa_rev)), and the total functional

    E(c_T) - E(c_0) + int_0^T (R + D) dt,

which vanishes exactly along solutions with j = kappa[c] and is
nonnegative on every continuity-consistent pair.

The backward flux paired with channel (k, l-1) is the rate of the reverse
jump (l, k-1): kappa_rev(k, l-1) = Kdag_t(l, k-1) c_l c_{k-1}, so that
theta = sqrt(kappa kappa_rev) has the closed form
K omega_k omega_{l-1} sqrt(u_k u_{l-1} u_l u_{k-1}) with u = c / omega.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import List, Optional, Sequence

import numpy as np

from .equilibrium import WeightTable, equilibrium_measure, relative_entropy
from .kernels import backward_table
from .meanfield import EdgSystem, Trajectory, apply_exchange_flux, expected_flux
from .metrics import exchange_gradient


class ContinuityError(ValueError):
    """A supplied (c, j) pair does not satisfy the exchange continuity equation."""


# ---------------------------------------------------------------------------
# extended-real arithmetic
# ---------------------------------------------------------------------------

class XReal:
    """Three-state extended real: finite value, +inf, or -inf.

    Multiplication follows a * (+inf) = +inf, 0, -inf for a >0, =0, <0;
    IEEE float infinities are deliberately not reused because 0 * inf must
    be 0 here, not nan.
    """

    __slots__ = ("v", "inf")

    def __init__(self, value: float = 0.0, inf: int = 0):
        if inf not in (-1, 0, 1):
            raise ValueError("inf must be -1, 0 or +1")
        self.v = float(value) if inf == 0 else 0.0
        self.inf = inf

    @property
    def is_finite(self) -> bool:
        return self.inf == 0

    def value(self) -> float:
        if self.inf != 0:
            raise ArithmeticError("infinite extended real has no float value")
        return self.v

    def as_float(self) -> float:
        return self.v if self.inf == 0 else (math.inf if self.inf > 0 else -math.inf)

    def __neg__(self) -> "XReal":
        return XReal(-self.v, -self.inf)

    def __add__(self, other) -> "XReal":
        other = other if isinstance(other, XReal) else XReal(other)
        if self.inf == 0 and other.inf == 0:
            return XReal(self.v + other.v)
        if self.inf != 0 and other.inf != 0 and self.inf != other.inf:
            raise ArithmeticError("(+inf) + (-inf) is undefined")
        return XReal(inf=self.inf if self.inf != 0 else other.inf)

    __radd__ = __add__

    def __mul__(self, other) -> "XReal":
        other = other if isinstance(other, XReal) else XReal(other)
        if self.inf == 0 and other.inf == 0:
            return XReal(self.v * other.v)
        a, inf_side = (other, self) if self.inf != 0 else (self, other)
        if a.inf != 0:                      # both infinite
            return XReal(inf=a.inf * inf_side.inf)
        if a.v > 0:
            return XReal(inf=inf_side.inf)
        if a.v < 0:
            return XReal(inf=-inf_side.inf)
        return XReal(0.0)                   # 0 * (+-inf) = 0

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        other = other if isinstance(other, XReal) else XReal(other)
        return self.inf == other.inf and (self.inf != 0 or self.v == other.v)

    def __repr__(self):
        return {1: "XReal(+inf)", -1: "XReal(-inf)"}.get(self.inf, f"XReal({self.v!r})")


POS_INF = XReal(inf=1)
NEG_INF = XReal(inf=-1)


def xabs(x: XReal) -> XReal:
    return XReal(abs(x.v)) if x.inf == 0 else POS_INF


# ---------------------------------------------------------------------------
# convex functions
# ---------------------------------------------------------------------------

def phi(x: float) -> float:
    """x log x - x + 1, with phi(0) = 1."""
    if x < 0:
        raise ValueError("phi needs x >= 0")
    if x == 0.0:
        return 1.0
    return x * math.log(x) - x + 1.0


def phi_star(r: float) -> float:
    return math.exp(r) - 1.0


def psi_star(r: float) -> float:
    return math.exp(r) + math.exp(-r) - 2.0


def phi_perspective(a: float, b: float) -> float:
    """Perspective b phi(a/b): equals b at a = 0, +inf for a > 0, b = 0."""
    if a < 0 or b < 0:
        raise ValueError("perspective needs a, b >= 0")
    if a == 0.0:
        return b
    if b == 0.0:
        return math.inf
    return a * math.log(a / b) - a + b


def m_log(x, m: float):
    """Truncated logarithm clip(log x, -m, m); converges monotonically to log."""
    with np.errstate(divide="ignore"):
        return np.clip(np.log(x), -m, m)


def a_func(u: float, v: float) -> XReal:
    """A(u, v) = log v - log u extended by A(0,0) = 0."""
    if u < 0 or v < 0:
        raise ValueError("A needs u, v >= 0")
    if u == 0.0 and v == 0.0:
        return XReal(0.0)
    if u == 0.0:
        return POS_INF
    if v == 0.0:
        return NEG_INF
    return XReal(math.log(v) - math.log(u))


def b_func(u: float, v: float, w: float) -> XReal:
    """B(u, v, w) = A(u, v) * w under the 0 * inf = 0 convention."""
    return a_func(u, v) * XReal(w)


def d_func(u: float, v: float) -> float:
    """Per-channel Fisher term D(u, v) = u - sqrt(u v)."""
    if u < 0 or v < 0:
        raise ValueError("D needs u, v >= 0")
    return u - math.sqrt(u * v)


# ---------------------------------------------------------------------------
# array kernels of the functionals
# ---------------------------------------------------------------------------

def entropy_dissipation(flux: np.ndarray, theta: np.ndarray) -> float:
    """R = sum phi(j | theta) over channels; +inf if j charges a theta-null channel."""
    j = np.asarray(flux, dtype=float)
    th = np.asarray(theta, dtype=float)
    pos = j > 0.0
    if np.any(th[pos] <= 0.0):
        return math.inf
    jp = j[pos]
    tp = th[pos]
    return float(np.sum(jp * np.log(jp / tp) - jp + tp) + th[~pos].sum())


def b_sum(kappa: np.ndarray, kappa_rev: np.ndarray, flux: np.ndarray) -> float:
    """sum B(kappa, kappa_rev, j) over channels, as a float (may be +-inf).

    Channels with j = 0 contribute 0 by the 0 * inf convention; a positive
    flux against kappa_rev = 0 contributes -inf, against kappa = 0 +inf.
    """
    j = np.asarray(flux, dtype=float)
    u = np.asarray(kappa, dtype=float)
    v = np.asarray(kappa_rev, dtype=float)
    act = j != 0.0
    if not np.any(act):
        return 0.0
    ua, va, ja = u[act], v[act], j[act]
    neg_inf = np.any(va == 0.0)
    pos_inf = np.any(ua == 0.0)
    if neg_inf and pos_inf:
        raise ArithmeticError("(+inf) + (-inf) in channel sum of B")
    if pos_inf:
        return math.inf
    if neg_inf:
        return -math.inf
    return float(np.sum((np.log(va) - np.log(ua)) * ja))


def hellinger_sq(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))


# ---------------------------------------------------------------------------
# context bundling system, weights, and reference equilibrium
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class EdpContext:
    """Everything needed to evaluate the functionals at density rho."""

    sys: EdgSystem
    wt: WeightTable
    rho: float
    omega: np.ndarray
    log_omega: np.ndarray

    @property
    def m(self) -> int:
        return self.sys.m


def make_context(sys: EdgSystem, wt: WeightTable, rho: float) -> EdpContext:
    em = equilibrium_measure(wt.truncate(sys.m), rho=rho)
    return EdpContext(sys, wt, rho, em.dist.p, em.log_p)


def _clip_state(c) -> np.ndarray:
    # integrators may leave components a few ulp below zero
    return np.maximum(np.asarray(c, dtype=float), 0.0)


def energy(c: np.ndarray, ctx: EdpContext) -> float:
    """E(c) = (1/2) Ent(c | omega^rho)."""
    return 0.5 * relative_entropy(_clip_state(c), ctx.log_omega)


def kappa(ctx: EdpContext, t: float, c: np.ndarray) -> np.ndarray:
    return expected_flux(ctx.sys, t, _clip_state(c))


def kappa_rev(ctx: EdpContext, t: float, c: np.ndarray) -> np.ndarray:
    """Backward flux through the reverse of each channel: Kdag_t(l,k-1) c_l c_{k-1}."""
    m = ctx.m
    c = _clip_state(c)
    krev = backward_table(ctx.sys.spec, ctx.sys.pert, t, m)
    return krev * c[None, 1:m + 1] * c[0:m, None]


def theta(ctx: EdpContext, t: float, c: np.ndarray) -> np.ndarray:
    """Geometric mean of forward and backward fluxes, in closed form."""
    m = ctx.m
    c = _clip_state(c)
    u = c / ctx.omega
    w2 = ctx.omega[1:m + 1, None] * ctx.omega[None, 0:m]
    prod = (u[1:m + 1, None] * u[None, 0:m]) * (u[None, 1:m + 1] * u[0:m, None])
    return ctx.sys.rates(t) * w2 * np.sqrt(prod)


def dissipation_r(ctx: EdpContext, t: float, c: np.ndarray, flux: np.ndarray) -> float:
    return entropy_dissipation(flux, theta(ctx, t, c))


def dissipation_d(ctx: EdpContext, t: float, c: np.ndarray) -> float:
    """D = sum (kappa - sqrt(kappa kappa_rev)) over channels."""
    ka = kappa(ctx, t, c)
    kr = kappa_rev(ctx, t, c)
    return float(np.sum(ka - np.sqrt(ka * kr)))


def dissipation_d_split(ctx: EdpContext, t: float, c: np.ndarray):
    """(Hellinger^2, antisymmetric half-sum) decomposition of D."""
    ka = kappa(ctx, t, c)
    kr = kappa_rev(ctx, t, c)
    return hellinger_sq(ka, kr), 0.5 * float(np.sum(ka - kr))


def f_rate(ctx: EdpContext, t: float, c: np.ndarray) -> float:
    """F_t(c) = -(1/2) sum B(kappa, kappa_rev, kappa); equals R + D at the flow flux."""
    ka = kappa(ctx, t, c)
    kr = kappa_rev(ctx, t, c)
    return -0.5 * b_sum(ka, kr, ka)


def half_grad_log_u(ctx: EdpContext, c: np.ndarray) -> np.ndarray:
    """-(1/2) exchange gradient of log(c/omega); defined for positive c."""
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise ValueError("gradient of log u needs a positive density")
    return -0.5 * exchange_gradient(np.log(c / ctx.omega))


def r_star(theta_arr: np.ndarray, zeta: np.ndarray) -> float:
    """Legendre dual R*(c, zeta) = sum (e^zeta - 1) theta."""
    return float(np.sum((np.exp(zeta) - 1.0) * theta_arr))


# ---------------------------------------------------------------------------
# trajectory functionals
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class FunctionalReport:
    energy_start: float
    energy_end: float
    r_integral: float
    d_integral: float
    total: float
    quad_error: float
    continuity_residual: float

    def to_json(self) -> str:
        return json.dumps({
            "energy_start": self.energy_start,
            "energy_end": self.energy_end,
            "R_integral": self.r_integral,
            "D_integral": self.d_integral,
            "total": self.total,
            "quad_error": self.quad_error,
            "continuity_residual": self.continuity_residual,
        })


def trapz_with_error(values: np.ndarray, times: np.ndarray):
    full = float(np.trapezoid(values, times))
    coarse = float(np.trapezoid(values[::2], times[::2]))
    return full, abs(full - coarse) / 3.0


def continuity_residual(traj: Trajectory, fluxes: Sequence[np.ndarray]) -> float:
    """Max l1 defect of the trapezoid discrete continuity equation."""
    res = 0.0
    drift = [apply_exchange_flux(f) for f in fluxes]
    for i in range(traj.n - 1):
        dt = float(traj.times[i + 1] - traj.times[i])
        step = traj.states[i + 1] - traj.states[i] - 0.5 * dt * (drift[i] + drift[i + 1])
        res = max(res, float(np.abs(step).sum()))
    return res


def _fluxes_along(ctx: EdpContext, traj: Trajectory, fluxes) -> List[np.ndarray]:
    if fluxes is None:
        return [kappa(ctx, float(traj.times[i]), traj.states[i]) for i in range(traj.n)]
    return [np.asarray(f, dtype=float) for f in fluxes]


def edf_total(ctx: EdpContext, traj: Trajectory, fluxes=None,
              check_continuity: bool = True, ce_tol: float = 1e-4) -> FunctionalReport:
    """Energy change plus integrated dissipation along a (c, j) pair.

    ``fluxes`` defaults to the expected flux kappa[c] on the grid.  The pair
    is required to satisfy the discrete continuity equation within ce_tol
    unless check_continuity is False (used to evaluate the functional on
    deliberately inconsistent fluxes, where it is simply the same formula).
    """
    fl = _fluxes_along(ctx, traj, fluxes)
    ce_res = continuity_residual(traj, fl)
    if check_continuity and ce_res > ce_tol:
        raise ContinuityError(
            f"continuity defect {ce_res:.3e} exceeds tolerance {ce_tol:.3e}")
    r_vals = np.array([dissipation_r(ctx, float(traj.times[i]), traj.states[i], fl[i])
                       for i in range(traj.n)])
    d_vals = np.array([dissipation_d(ctx, float(traj.times[i]), traj.states[i])
                       for i in range(traj.n)])
    r_int, r_err = trapz_with_error(r_vals, traj.times)
    d_int, d_err = trapz_with_error(d_vals, traj.times)
    e0 = energy(traj.states[0], ctx)
    e1 = energy(traj.states[-1], ctx)
    return FunctionalReport(e0, e1, r_int, d_int, e1 - e0 + r_int + d_int,
                            r_err + d_err, ce_res)


@dataclasses.dataclass(frozen=True)
class ChainRuleReport:
    energy_change: float
    flux_work: float          # int (1/2) sum B(kappa, kappa_rev, j) dt
    residual: float
    quad_error: float


def chain_rule_check(ctx: EdpContext, traj: Trajectory, fluxes=None) -> ChainRuleReport:
    """|E(c_T) - E(c_0) - int (1/2) sum B dt| with its quadrature estimate."""
    fl = _fluxes_along(ctx, traj, fluxes)
    vals = np.empty(traj.n)
    for i in range(traj.n):
        t = float(traj.times[i])
        vals[i] = 0.5 * b_sum(kappa(ctx, t, traj.states[i]),
                              kappa_rev(ctx, t, traj.states[i]), fl[i])
    work, err = trapz_with_error(vals, traj.times)
    de = energy(traj.states[-1], ctx) - energy(traj.states[0], ctx)
    return ChainRuleReport(de, work, abs(de - work), err)


# ---------------------------------------------------------------------------
# pointwise equality condition
# ---------------------------------------------------------------------------

EQUALITY = "equality-holds"
STRICT = "strict-inequality"
INFINITE = "infinite-case"


def equality_condition(u: float, v: float, j: float, k_scale: float,
                       rtol: float = 1e-9) -> str:
    """Classify -(1/2)B(u,v,j) vs phi(j|theta) + K D(u,v) with theta = K sqrt(uv).

    Equality (finite) holds exactly when j = K u; otherwise the Fenchel gap
    is strictly positive; cases where either side is infinite are flagged.
    """
    if k_scale <= 0:
        raise ValueError("k_scale must be positive")
    th = k_scale * math.sqrt(u * v)
    lhs = -XReal(0.5) * b_func(u, v, j)
    rhs_pers = phi_perspective(j, th)
    rhs = rhs_pers + k_scale * d_func(u, v)
    if not lhs.is_finite or math.isinf(rhs):
        return INFINITE
    if abs(lhs.value() - rhs) <= rtol * (1.0 + abs(rhs)):
        return EQUALITY
    return STRICT
