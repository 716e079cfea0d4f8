"""Exchange rate kernels.

A kernel K(k, l) is the rate at which a cluster of size k >= 1 hands one
particle to a cluster of size l >= 0.  Kernels are tabulated on a finite
size window 0..m_max and treated as zero beyond it, so every admissible
jump keeps both conserved quantities (cluster count and total mass) inside
the window.

Three reversible families are provided:

  * constant:       K(k, l) = value
  * product:        K(k, l) = a(k) * b(l), e.g. a(k) = k^alpha, b(l) = (l+1)^alpha
  * weight-driven:  K(k, 0) = 1 and K(1, l-1) = w(l)/w(l-1) for a target
                    stationary weight sequence w, extended multiplicatively
                    so the Becker-Doring triple-product identity holds; the
                    resulting rate depends only on the receiving size.

A time perturbation b_t(k, l) with finite sup norm tilts the forward rate
to K_t = Kbar * exp(b_t); the backward rate is the weight-twisted flip
K_t(k, l-1) w_k w_{l-1} = Kdag_t(l, k-1) w_l w_{k-1}.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np


class KernelError(ValueError):
    pass


class KernelRangeError(KernelError):
    """Index outside the tabulated window."""


class PositivityError(KernelError):
    """A rate required to be positive vanishes."""


class AbsoluteContinuityError(KernelError):
    """A weight in the backward-kernel denominator vanishes while the numerator does not."""


# ---------------------------------------------------------------------------
# time perturbations
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Perturbation:
    """Bounded tilt b_t(k, l) of the forward kernel.

    ``fn(t, k, l)`` must accept numpy arrays for k, l and broadcast.
    ``sup_norm`` bounds |b_t| everywhere; ``c_b`` is the constant in the
    admissibility difference bounds |b_t(l,k) - b_t(l,k-1)| <= c_b/k and
    |b_t(l+1,k-1) - b_t(l,k-1)| <= c_b/l.
    """

    fn: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    sup_norm: float
    c_b: float

    @property
    def is_zero(self) -> bool:
        return self.sup_norm == 0.0

    def __call__(self, t, k, l):
        return self.fn(t, np.asarray(k), np.asarray(l))

    def table(self, t: float, donors: np.ndarray, recipients: np.ndarray) -> np.ndarray:
        """Evaluate b_t on the channel grid donors x recipients."""
        return np.asarray(self.fn(t, donors[:, None], recipients[None, :]), dtype=float)


def no_perturbation() -> Perturbation:
    return Perturbation(lambda t, k, l: np.zeros(np.broadcast(k, l).shape), 0.0, 0.0)


def constant_perturbation(c: float) -> Perturbation:
    # constant in (k, l): both difference bounds hold with c_b = 0
    return Perturbation(lambda t, k, l: np.full(np.broadcast(k, l).shape, float(c)),
                        abs(float(c)), 0.0)


def smooth_perturbation(amplitude: float, freq: float = 1.0) -> Perturbation:
    """b_t(k,l) = amplitude * sin(freq*t) * (1/k + 2/(l+1)).

    Satisfies the admissibility difference bounds with c_b = amplitude and
    sup norm 3*amplitude.  The value at channel (k, l-1) differs from the
    value at the flipped channel (l, k-1), so the tilted chain is genuinely
    irreversible.
    """
    a = float(amplitude)

    def fn(t, k, l):
        k = np.asarray(k, dtype=float)
        l = np.asarray(l, dtype=float)
        return a * math.sin(freq * t) * (1.0 / k + 2.0 / (l + 1.0))

    return Perturbation(fn, 3.0 * a, a)


# ---------------------------------------------------------------------------
# kernel families
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class KernelSpec:
    """Tabulated reversible base kernel.

    ``table[k, l]`` holds Kbar(k, l) for 1 <= k <= m_max, 0 <= l <= m_max;
    row k = 0 is identically zero.  ``phi_c`` carries the analytic ratio
    limit lim_k Kbar(k,0)/Kbar(1,k-1) when the family admits one.
    """

    family: str
    m_max: int
    table: np.ndarray
    phi_c: Optional[float] = None

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.shape != (self.m_max + 1, self.m_max + 1):
            raise KernelError(f"table shape {t.shape} != {(self.m_max + 1, self.m_max + 1)}")
        if np.any(t < 0):
            raise KernelError("negative kernel entry")
        object.__setattr__(self, "table", t)

    def value(self, k: int, l: int) -> float:
        if not (1 <= k <= self.m_max and 0 <= l <= self.m_max):
            raise KernelRangeError(f"(k={k}, l={l}) outside window m_max={self.m_max}")
        return float(self.table[k, l])

    def channel_table(self, m: int) -> np.ndarray:
        """Kbar on the channel grid: rows k = 1..m, cols j = l-1 = 0..m-1."""
        if m > self.m_max:
            raise KernelRangeError(f"window m={m} exceeds m_max={self.m_max}")
        return self.table[1:m + 1, 0:m]

    @property
    def linear_growth_constant(self) -> float:
        """Sharp constant C with Kbar(k, l-1) <= C * k * l on the table."""
        m = self.m_max
        k = np.arange(1, m + 1, dtype=float)[:, None]
        l = np.arange(1, m + 1, dtype=float)[None, :]
        return float(np.max(self.table[1:, 0:m] / (k * l)))


def constant_kernel(value: float = 1.0, m_max: int = 64) -> KernelSpec:
    if value <= 0:
        raise PositivityError("constant kernel requires value > 0")
    t = np.full((m_max + 1, m_max + 1), float(value))
    t[0, :] = 0.0
    return KernelSpec("constant", m_max, t, phi_c=1.0)


def product_kernel(a, b, m_max: int = 64, phi_c: Optional[float] = None) -> KernelSpec:
    """K(k, l) = a(k) * b(l) from sequences or callables.

    ``a`` is indexed over donors k = 1..m_max, ``b`` over recipients
    l = 0..m_max.  Product kernels satisfy the Becker-Doring identity by
    algebra, so any positive a, b give a reversible family.
    """
    ks = np.arange(0, m_max + 1)
    av = np.asarray(a(ks[1:]), dtype=float) if callable(a) else np.asarray(a, dtype=float)
    bv = np.asarray(b(ks), dtype=float) if callable(b) else np.asarray(b, dtype=float)
    if av.shape != (m_max,) or bv.shape != (m_max + 1,):
        raise KernelError("sequence lengths must be m_max (a) and m_max+1 (b)")
    if np.any(av <= 0) or np.any(bv <= 0):
        raise PositivityError("product factors must be positive")
    t = np.zeros((m_max + 1, m_max + 1))
    t[1:, :] = av[:, None] * bv[None, :]
    return KernelSpec("product", m_max, t, phi_c=phi_c)


def power_product_kernel(alpha: float, m_max: int = 64) -> KernelSpec:
    """K(k, l) = k^alpha * (l+1)^alpha; ratio limit is exactly 1."""
    return product_kernel(lambda k: k.astype(float) ** alpha,
                          lambda l: (l + 1.0) ** alpha, m_max, phi_c=1.0)


def weight_driven_kernel(target_w, m_max: int = 64,
                         phi_c: Optional[float] = None) -> KernelSpec:
    """Kernel whose stationary weights are exactly ``target_w``.

    target_w maps sizes 0..m_max to positive weights with w(0) = w(1) = 1.
    The rate K(k, l-1) = w(l)/w(l-1) depends only on the receiving size.
    """
    n = np.arange(0, m_max + 1)
    w = np.asarray(target_w(n), dtype=float) if callable(target_w) else np.asarray(target_w, dtype=float)
    if w.shape != (m_max + 1,):
        raise KernelError("target weights must cover sizes 0..m_max")
    if np.any(w <= 0):
        raise PositivityError("target weights must be positive")
    if abs(w[0] - 1.0) > 1e-12 or abs(w[1] - 1.0) > 1e-12:
        raise KernelError("target weights must satisfy w(0) = w(1) = 1")
    ratios = w[1:] / w[:-1]                       # ratio[j] = w(j+1)/w(j), receiving size j
    t = np.zeros((m_max + 1, m_max + 1))
    t[1:, :-1] = ratios[None, :]
    t[1:, -1] = ratios[-1]                        # edge column, never used by in-window channels
    return KernelSpec("weight_driven", m_max, t, phi_c=phi_c)


def power_law_weight_kernel(gamma: float, m_max: int = 64) -> KernelSpec:
    """Weight-driven family with w(n) = n^-gamma (n >= 1); ratio limit 1."""
    def w(n):
        out = np.ones(len(n))
        out[1:] = np.arange(1, len(n), dtype=float) ** (-gamma)
        return out
    return weight_driven_kernel(w, m_max, phi_c=1.0)


# ---------------------------------------------------------------------------
# assembled forward / backward rates
# ---------------------------------------------------------------------------

def forward_kernel(spec: KernelSpec, pert: Perturbation, t: float, k: int, l: int) -> float:
    """K_t(k, l) = Kbar(k, l) * exp(b_t(k, l)); exact Kbar for b == 0."""
    base = spec.value(k, l)
    if pert.is_zero:
        return base
    return base * math.exp(float(pert(t, k, l)))


def forward_table(spec: KernelSpec, pert: Perturbation, t: float, m: int) -> np.ndarray:
    """K_t on the channel grid (k = 1..m) x (j = l-1 = 0..m-1)."""
    base = spec.channel_table(m)
    if pert.is_zero:
        return base
    b = pert.table(t, np.arange(1, m + 1), np.arange(0, m))
    return base * np.exp(b)


def backward_kernel(spec: KernelSpec, pert: Perturbation, weights, t: float,
                    k: int, l: int) -> float:
    """Backward rate Kdag_t(l, k-1) defined by the weight-twisted flip.

    Solves K_t(k, l-1) w_k w_{l-1} = Kdag_t(l, k-1) w_l w_{k-1} for the
    backward entry; with b == 0 this equals Kbar(l, k-1) by detailed
    balance.  ``weights`` is a WeightTable (or anything with ``log_w``).
    """
    if l < 1:
        raise KernelRangeError("backward kernel needs l >= 1")
    log_w = weights.log_w
    for idx in (k, l - 1, l, k - 1):
        if not 0 <= idx < len(log_w):
            raise KernelRangeError(f"weight index {idx} outside table")
    if not np.isfinite(log_w[l]) or not np.isfinite(log_w[k - 1]):
        if np.isfinite(log_w[k]) and np.isfinite(log_w[l - 1]):
            raise AbsoluteContinuityError(
                f"zero weight at size {l if not np.isfinite(log_w[l]) else k - 1} "
                "in backward-kernel denominator")
        return 0.0
    fwd = forward_kernel(spec, pert, t, k, l - 1)
    return fwd * math.exp(log_w[k] + log_w[l - 1] - log_w[l] - log_w[k - 1])


def backward_table(spec: KernelSpec, pert: Perturbation, t: float, m: int) -> np.ndarray:
    """Backward rates paired with forward channels.

    Entry [k-1, j] holds Kdag_t(j+1, k-1), the rate of the jump that
    reverses channel (k, j): equal to Kbar(j+1, k-1) * exp(b_t(k, j)),
    which is the closed form of the weight-twisted flip.
    """
    base = spec.channel_table(m).T.copy()         # [k-1, j] = Kbar(j+1, k-1)
    if pert.is_zero:
        return base
    b = pert.table(t, np.arange(1, m + 1), np.arange(0, m))
    return base * np.exp(b)


# ---------------------------------------------------------------------------
# assumption validation
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class AssumptionReport:
    """Pass/fail diagnostics for the reversible kernel and its perturbation.

    Purely observational; never mutates the inputs.  ``ku_c1``/``ku_c2``
    are the two sharp difference-bound constants, reported separately.
    """

    m_max: int
    linear_growth_constant: float
    linear_growth_ok: bool
    sublinear_ok: Optional[bool]
    ku_c1: float
    ku_c2: float
    positivity_ok: bool
    min_required_rate: float
    ratio_limit_estimate: float
    ratio_limit_is_estimate: bool
    becker_doring_residual: float
    becker_doring_ok: bool
    pert_sup_observed: float
    pert_sup_ok: bool
    pert_diff_c1: float
    pert_diff_c2: float
    pert_diff_ok: bool

    @property
    def all_required_pass(self) -> bool:
        return (self.linear_growth_ok and self.positivity_ok
                and self.becker_doring_ok and self.pert_sup_ok and self.pert_diff_ok)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def validate_assumptions(spec: KernelSpec, pert: Optional[Perturbation] = None,
                         m: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                         bda_tol: float = 1e-12,
                         t_samples=(0.0, 0.37, 1.0, 2.5)) -> AssumptionReport:
    """Check the standing kernel assumptions on the tabulated range.

    ``m`` is an optional sublinear majorant to test Kbar(k,l-1) <= m(k)m(l).
    Ratio-limit validation evaluates Kbar(k,0)/Kbar(1,k-1) at the largest
    tabulated k and reports it as an estimate (or the analytic value when
    the family carries one).
    """
    if pert is None:
        pert = no_perturbation()
    M = spec.m_max
    if M < 2:
        raise KernelError("tabulated range too small to validate")
    T = spec.table

    c1 = spec.linear_growth_constant

    sub_ok = None
    if m is not None:
        ks = np.arange(1, M + 1, dtype=float)
        bound = np.asarray(m(ks))[:, None] * np.asarray(m(ks))[None, :]
        sub_ok = bool(np.all(T[1:, 0:M] <= bound * (1 + 1e-12)))

    # uniqueness difference bounds, sharp constants
    l = np.arange(1, M + 1, dtype=float)
    d1 = np.abs(T[1:, 1:] - T[1:, 0:M]) / l[:, None]          # |K(l,k)-K(l,k-1)| / l
    k = np.arange(1, M + 1, dtype=float)
    d2 = np.abs(T[2:, 0:M] - T[1:M, 0:M]) / k[None, :]        # |K(l+1,k-1)-K(l,k-1)| / k
    ku_c1 = float(d1.max())
    ku_c2 = float(d2.max())

    required = np.concatenate([T[1:, 0], T[1, 0:M]])          # K(l,0), K(1,l-1)
    pos_ok = bool(np.all(required > 0))
    min_req = float(required.min())

    ratio = float(T[M, 0] / T[1, M - 1]) if T[1, M - 1] > 0 else math.inf
    if spec.phi_c is not None:
        ratio_est, is_est = float(spec.phi_c), False
    else:
        ratio_est, is_est = ratio, True

    kk = np.arange(1, M + 1)
    Kkl = T[1:, 0:M]                                          # [k-1, l-1] = K(k, l-1)
    kl0 = T[kk, 0]                                            # K(k, 0) over k = 1..M
    k1l = T[1, kk - 1]                                        # K(1, k-1) over k = 1..M
    lhs = Kkl * kl0[None, :] * k1l[:, None]                   # K(k,l-1) K(l,0) K(1,k-1)
    rhs = Kkl.T * kl0[:, None] * k1l[None, :]                 # K(l,k-1) K(k,0) K(1,l-1)
    denom = np.abs(lhs) + np.abs(rhs) + 1e-300
    bda_res = float(np.max(np.abs(lhs - rhs) / denom))

    # perturbation bounds sampled on the grid and a few times
    sup_obs = 0.0
    pdc1 = 0.0
    pdc2 = 0.0
    if not pert.is_zero:
        don = np.arange(1, M + 1)
        rec = np.arange(0, M)
        for ts in t_samples:
            b = pert.table(ts, don, rec)
            sup_obs = max(sup_obs, float(np.abs(b).max()))
            # |b(l,k) - b(l,k-1)| * k and |b(l+1,k-1) - b(l,k-1)| * l
            pdc1 = max(pdc1, float(np.max(np.abs(b[:, 1:] - b[:, :-1]) * rec[1:][None, :])))
            pdc2 = max(pdc2, float(np.max(np.abs(b[1:, :] - b[:-1, :]) * don[:-1][:, None])))
    sup_ok = sup_obs <= pert.sup_norm + 1e-12
    diff_ok = pdc1 <= pert.c_b + 1e-12 and pdc2 <= pert.c_b + 1e-12

    return AssumptionReport(
        m_max=M,
        linear_growth_constant=c1,
        linear_growth_ok=math.isfinite(c1),
        sublinear_ok=sub_ok,
        ku_c1=ku_c1,
        ku_c2=ku_c2,
        positivity_ok=pos_ok,
        min_required_rate=min_req,
        ratio_limit_estimate=ratio_est,
        ratio_limit_is_estimate=is_est,
        becker_doring_residual=bda_res,
        becker_doring_ok=bda_res <= bda_tol,
        pert_sup_observed=sup_obs,
        pert_sup_ok=sup_ok,
        pert_diff_c1=pdc1,
        pert_diff_c2=pdc2,
        pert_diff_ok=diff_ok,
    )
