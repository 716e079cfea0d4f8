"""Kinetic Monte Carlo simulation of the lifted exchange chain.

State: integer occupation counts n_k over sizes 0..m with sum n_k = L
clusters and sum k n_k = N particles; both are conserved exactly by every
jump.  A jump through channel (k, l-1) moves one particle from a k-cluster
to an (l-1)-cluster at chain rate

    n_k (n_{l-1} - delta_{k,l-1}) K_t(k, l-1) / (L - 1).

Time-inhomogeneous rates are simulated exactly by thinning: exponential
clocks run against the majorant kernel Kbar e^{||b||}, and a proposed jump
at time t is accepted with probability e^{b_t(k,l-1) - ||b||}.  With b = 0
this reduces to the plain stochastic simulation algorithm.

The per-channel majorant rate matrix is recomputed vectorially after each
accepted jump and sampled through a cumulative sum, which is the fast path
in numpy at the channel counts used here.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import List, Optional, Sequence

import numpy as np

from .kernels import KernelSpec, Perturbation, no_perturbation
from .metrics import ClusterDistribution


class ConfigurationError(RuntimeError):
    pass


@dataclasses.dataclass
class MicroState:
    """Occupation counts of the lifted chain."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or np.any(c < 0):
            raise ValueError("counts must be a nonnegative integer vector")
        self.counts = c

    @property
    def m(self) -> int:
        return len(self.counts) - 1

    @property
    def n_clusters(self) -> int:
        return int(self.counts.sum())

    @property
    def n_particles(self) -> int:
        return int(self.counts @ np.arange(len(self.counts)))

    def distribution(self) -> ClusterDistribution:
        return ClusterDistribution(self.counts / self.n_clusters)

    def trim(self, m: int) -> "MicroState":
        """Re-window to sizes 0..m; only trailing zero counts may be dropped."""
        if m + 1 >= len(self.counts):
            out = np.zeros(m + 1, dtype=np.int64)
            out[:len(self.counts)] = self.counts
            return MicroState(out)
        if np.any(self.counts[m + 1:] != 0):
            raise ValueError("occupied sizes beyond the requested window")
        return MicroState(self.counts[:m + 1].copy())


def state_from_counts(counts) -> MicroState:
    return MicroState(np.asarray(counts))


def sample_product_state(c: ClusterDistribution, n_clusters: int, rng,
                         m: Optional[int] = None) -> MicroState:
    """L cluster sizes drawn iid from c; the particle number is then random."""
    m = c.m if m is None else m
    p = c.padded(m)
    p = p / p.sum()
    sizes = rng.choice(m + 1, size=n_clusters, p=p)
    return MicroState(np.bincount(sizes, minlength=m + 1))


def member_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for ensemble member ``index``."""
    return np.random.Generator(np.random.Philox(key=seed).jumped(index))


def channel_rate(state: MicroState, spec: KernelSpec, pert: Perturbation,
                 t: float, k: int, l: int) -> float:
    """Chain rate of channel (k, l-1); zero if the jump would leave the window."""
    m = state.m
    if k < 1 or k > m or l < 1 or l > m:
        return 0.0
    n = state.counts
    L = state.n_clusters
    pair = n[k] * (n[l - 1] - (1 if k == l - 1 else 0))
    if pair <= 0:
        return 0.0
    base = spec.value(k, l - 1)
    if not pert.is_zero:
        base *= math.exp(float(pert(t, k, l - 1)))
    return pair * base / (L - 1)


def total_rate(state: MicroState, spec: KernelSpec, pert: Perturbation, t: float) -> float:
    m = state.m
    n = state.counts
    L = state.n_clusters
    P = np.outer(n[1:m + 1], n[0:m]).astype(float)
    idx = np.arange(1, m)
    P[idx - 1, idx] -= n[idx]
    K = spec.channel_table(m)
    if not pert.is_zero:
        K = K * np.exp(pert.table(t, np.arange(1, m + 1), np.arange(0, m)))
    return float(np.sum(P * K) / (L - 1))


@dataclasses.dataclass
class ParticleTrajectory:
    """Empirical-measure snapshots and cumulative per-channel jump counts."""

    times: np.ndarray
    counts: np.ndarray            # (n_out, m+1) integer occupation snapshots
    jump_counts: Optional[np.ndarray]   # (n_out, m, m) cumulative accepted jumps
    n_clusters: int
    n_particles: int
    n_jumps: int
    n_proposals: int
    seed: Optional[int]

    @property
    def states(self) -> np.ndarray:
        return self.counts / self.n_clusters

    def dist(self, i: int) -> ClusterDistribution:
        return ClusterDistribution(self.counts[i] / self.n_clusters)

    def export_csv(self, path):
        m = self.counts.shape[1] - 1
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"c_{k}" for k in range(m + 1)])
            for i, t in enumerate(self.times):
                wr.writerow([repr(float(t))]
                            + [repr(float(x)) for x in self.counts[i] / self.n_clusters])


def simulate(state0: MicroState, spec: KernelSpec, pert: Optional[Perturbation],
             t_final: float, seed: Optional[int] = None,
             rng: Optional[np.random.Generator] = None,
             t_out: Optional[Sequence[float]] = None,
             record_flux: bool = True,
             check_every_jump: bool = False) -> ParticleTrajectory:
    """Exact-in-law jump-chain simulation with output snapshots.

    Snapshots are taken at the requested output times (default: 0 and
    t_final); flux counters are cumulative accepted-jump counts per channel
    at each output time.
    """
    if pert is None:
        pert = no_perturbation()
    if rng is None:
        if seed is None:
            raise ValueError("pass either seed or rng")
        rng = np.random.Generator(np.random.Philox(key=seed))
    m = state0.m
    if m > spec.m_max:
        raise ConfigurationError("state window exceeds kernel table")
    n = state0.counts.copy()
    L = int(n.sum())
    N = int(n @ np.arange(m + 1))
    if L < 2:
        raise ConfigurationError("need at least two clusters")
    t_out = np.array([0.0, t_final], dtype=float) if t_out is None else np.asarray(t_out, dtype=float)
    if np.any(np.diff(t_out) < 0) or t_out[0] < 0 or t_out[-1] > t_final + 1e-12:
        raise ConfigurationError("output times must be sorted within [0, t_final]")

    Kb = spec.channel_table(m)
    scale = math.exp(pert.sup_norm) / (L - 1)
    diag = np.arange(1, m)

    snap_counts = np.empty((len(t_out), m + 1), dtype=np.int64)
    snap_jumps = np.zeros((len(t_out), m, m), dtype=np.int64) if record_flux else None
    jumps = np.zeros((m, m), dtype=np.int64) if record_flux else None

    out_i = 0
    t = 0.0
    n_jumps = 0
    n_props = 0
    stale = True
    flat = None
    tot = 0.0

    def flush_until(time_limit: float):
        nonlocal out_i
        while out_i < len(t_out) and t_out[out_i] <= time_limit + 1e-15:
            snap_counts[out_i] = n
            if record_flux:
                snap_jumps[out_i] = jumps
            out_i += 1

    while True:
        if stale:
            P = np.outer(n[1:m + 1], n[0:m]).astype(float)
            P[diag - 1, diag] -= n[diag]
            flat = np.cumsum((P * Kb).ravel() * scale)
            tot = float(flat[-1])
            if not math.isfinite(tot) or tot > 1e18:
                raise ConfigurationError(f"majorant rate overflow: {tot}")
            stale = False
        if tot <= 0.0:
            flush_until(t_final)
            t = t_final
            break
        t_next = t + rng.exponential(1.0 / tot)
        flush_until(min(t_next, t_final))
        if t_next > t_final:
            t = t_final
            break
        t = t_next
        n_props += 1
        r = rng.random() * tot
        idx = int(np.searchsorted(flat, r, side="right"))
        idx = min(idx, m * m - 1)
        k = idx // m + 1
        j = idx % m
        if not pert.is_zero:
            b = float(pert(t, k, j))
            if rng.random() >= math.exp(b - pert.sup_norm):
                continue
        n[k] -= 1
        n[j] -= 1
        n[k - 1] += 1
        n[j + 1] += 1
        if record_flux:
            jumps[k - 1, j] += 1
        n_jumps += 1
        stale = True
        if check_every_jump:
            assert int(n.sum()) == L and int(n @ np.arange(m + 1)) == N

    flush_until(t_final)
    return ParticleTrajectory(t_out.copy(), snap_counts, snap_jumps, L, N,
                              n_jumps, n_props, seed)


def ensemble_mean(dists: Sequence[ClusterDistribution]):
    """Arithmetic mean of empirical measures with per-coordinate standard errors."""
    if len(dists) == 0:
        raise ValueError("empty ensemble")
    m = max(d.m for d in dists)
    stack = np.stack([d.padded(m) for d in dists])
    mean = stack.mean(axis=0)
    if len(dists) > 1:
        se = stack.std(axis=0, ddof=1) / math.sqrt(len(dists))
    else:
        se = np.zeros(m + 1)
    return ClusterDistribution(mean, copy=False), se


def empirical_flux_rate(traj: ParticleTrajectory, window) -> np.ndarray:
    """Per-channel jump counts over a window divided by L * |window|."""
    if traj.jump_counts is None:
        raise ValueError("trajectory was recorded without flux counters")
    ta, tb = window
    ia = int(np.argmin(np.abs(traj.times - ta)))
    ib = int(np.argmin(np.abs(traj.times - tb)))
    if abs(traj.times[ia] - ta) > 1e-9 or abs(traj.times[ib] - tb) > 1e-9:
        raise ValueError("window endpoints must be snapshot times")
    if ib <= ia:
        raise ValueError("empty window")
    dt = float(traj.times[ib] - traj.times[ia])
    diff = traj.jump_counts[ib] - traj.jump_counts[ia]
    return diff / (traj.n_clusters * dt)
