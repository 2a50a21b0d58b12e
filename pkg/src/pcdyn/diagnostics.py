"""Energies, momenta, dissipation, trajectory comparison norms, and
convergence-order fitting.

Scale bookkeeping (Coulomb-scale forms used throughout).  With the
microscopic -> Coulomb map q -> eps q, v -> eps^(-1/2) v, t -> eps^(3/2) t,
microscopic energies carry one net factor of eps relative to the expressions
below, and the velocity-dependent terms of the Darwin energy pick up
explicit weights:

    H_C  = sum 1/2 m u^2 + 1/2 sum_{a != b} e_a e_b / (4 pi |xi|)

    H_D  = H_C + eps [ sum 3/8 m* u^4
           + 1/4 sum_{a != b} (e_a e_b / 4 pi |xi|)
                 ( u_a.u_b + (u_a.xi)(u_b.xi)/|xi|^2 ) ]

    H_RR = H_D - eps^(3/2) sum_{a,b} (e_a e_b / 6 pi) u_a . (du_b/dt)

Along Darwin solutions H_D is exactly conserved (the Lagrangian is
autonomous); along third-order solutions

    d/dt H_RR = - (eps^(3/2) / 6 pi) ( sum_a e_a du_a/dt )^2,

so H_RR decreases and the decrease rate is the dipole radiation rate.  The
identity residual check below discretizes the left side with centered
differences of sampled H_RR and adds the stored-rate right side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forces import FOUR_PI, PairGeometry
from .integrate import Trajectory, resample
from .params import ParticleSystem, PhaseState

__all__ = [
    "energy_coulomb",
    "energy_darwin",
    "energy_rr",
    "canonical_momentum",
    "dissipation_rate",
    "EnergyReport",
    "energy_report",
    "trajectory_energy_series",
    "dissipation_identity_residual",
    "ComparisonNorms",
    "compare",
    "ConvergenceFit",
    "fit_order",
]


def _pair_potential(state: PhaseState, sys: ParticleSystem) -> float:
    geom = PairGeometry.of(state.positions)
    e = sys.charges
    pot = 0.0
    for a in range(sys.n):
        for b in range(sys.n):
            if a != b:
                pot += e[a] * e[b] / (FOUR_PI * geom.dist[a, b])
    return 0.5 * pot


def energy_coulomb(state: PhaseState, sys: ParticleSystem) -> float:
    """H_C = sum 1/2 m u^2 + pair Coulomb potential."""
    u = state.velocities
    kin = 0.5 * float(np.sum(sys.masses * np.sum(u * u, axis=-1)))
    return kin + _pair_potential(state, sys)


def energy_darwin(state: PhaseState, sys: ParticleSystem, eps: float) -> float:
    """Darwin energy with explicit eps weights; equals H_C at eps = 0."""
    u = state.velocities
    geom = PairGeometry.of(state.positions)
    e = sys.charges
    u2 = np.sum(u * u, axis=-1)
    quartic = (3.0 / 8.0) * float(np.sum(sys.star_masses * u2 * u2))
    inter = 0.0
    for a in range(sys.n):
        for b in range(sys.n):
            if a == b:
                continue
            x, d = geom.xi[a, b], geom.dist[a, b]
            inter += (e[a] * e[b] / (FOUR_PI * d)) * (
                u[a] @ u[b] + (u[a] @ x) * (u[b] @ x) / d**2)
    return energy_coulomb(state, sys) + eps * (quartic + 0.25 * inter)


def energy_rr(state: PhaseState, accel, sys: ParticleSystem, eps: float) -> float:
    """H_RR = H_D - eps^(3/2) sum_{a,b} (e_a e_b / 6 pi) u_a . w_b."""
    w = np.atleast_2d(np.asarray(accel, float))
    e = sys.charges
    coupling = float((e @ state.velocities) @ (e @ w)) / (6.0 * math.pi)
    return energy_darwin(state, sys, eps) - eps ** 1.5 * coupling


def canonical_momentum(state: PhaseState, sys: ParticleSystem, eps: float
                       ) -> np.ndarray:
    """Total conjugate momentum of the Darwin system (conserved by
    translation invariance):

        P = sum_a [ m_a u_a + eps/2 m*_a u_a^2 u_a
            + eps/2 sum_{b != a} (e_a e_b / 4 pi)
              ( u_b/|xi| + (u_b.xi) xi / |xi|^3 ) ].
    """
    u = state.velocities
    geom = PairGeometry.of(state.positions)
    e = sys.charges
    total = np.zeros(3)
    for a in range(sys.n):
        p = (sys.masses[a] + 0.5 * eps * sys.star_masses[a] * (u[a] @ u[a])) * u[a]
        for b in range(sys.n):
            if b == a:
                continue
            x, d = geom.xi[a, b], geom.dist[a, b]
            p = p + 0.5 * eps * (e[a] * e[b] / FOUR_PI) * (
                u[b] / d + (u[b] @ x) * x / d**3)
        total += p
    return total


def dissipation_rate(accel, sys: ParticleSystem) -> float:
    """(1/6pi) (sum_a e_a du_a/dt)^2 >= 0; the scale-consistent energy-decay
    rate is eps^(3/2) times this."""
    w = np.atleast_2d(np.asarray(accel, float))
    dipole = sys.charges @ w
    return float(dipole @ dipole) / (6.0 * math.pi)


@dataclass(frozen=True)
class EnergyReport:
    """Energies and dissipation data at one sample."""

    time: float
    h_c: float
    h_d: float
    h_rr: float
    momentum: np.ndarray
    dissipation_rate: float


def energy_report(state: PhaseState, accel, sys: ParticleSystem, eps: float
                  ) -> EnergyReport:
    return EnergyReport(
        time=state.time,
        h_c=energy_coulomb(state, sys),
        h_d=energy_darwin(state, sys, eps),
        h_rr=energy_rr(state, accel, sys, eps),
        momentum=canonical_momentum(state, sys, eps),
        dissipation_rate=dissipation_rate(accel, sys),
    )


def trajectory_energy_series(traj: Trajectory, sys: ParticleSystem,
                             eps: float | None = None) -> dict[str, np.ndarray]:
    """Arrays of H_C, H_D, H_RR, |P| and dissipation rate along a trajectory."""
    eps = traj.epsilon if eps is None else eps
    n = len(traj)
    out = {k: np.empty(n) for k in
           ("h_c", "h_d", "h_rr", "dissipation_rate")}
    mom = np.empty((n, 3))
    for i in range(n):
        st = traj.phase_state(i)
        acc = traj.accelerations[i]
        out["h_c"][i] = energy_coulomb(st, sys)
        out["h_d"][i] = energy_darwin(st, sys, eps)
        out["h_rr"][i] = energy_rr(st, acc, sys, eps)
        out["dissipation_rate"][i] = dissipation_rate(acc, sys)
        mom[i] = canonical_momentum(st, sys, eps)
    out["momentum"] = mom
    return out


def dissipation_identity_residual(traj: Trajectory, sys: ParticleSystem,
                                  eps: float | None = None,
                                  n_samples: int | None = None
                                  ) -> tuple[np.ndarray, np.ndarray, float]:
    """Residual of d/dt H_RR + eps^(3/2) * rate along a third-order run.

    By default H_RR and the rate are evaluated at the trajectory's own
    sample points using the stored accelerations (no re-differencing of
    positions, no interpolation); with n_samples the trajectory is resampled
    onto a uniform grid first.  The time derivative uses centered
    differences (nonuniform-safe), so on a fixed-step run the residual
    converges at O(h^2) under step halving.  Returns (interior times,
    residual series, max |residual|)."""
    eps = traj.epsilon if eps is None else eps
    n = traj.n_particles
    if n_samples is None:
        grid = traj.times
        vals, dvals = traj.states, traj.derivs
    else:
        grid = np.linspace(traj.times[0], traj.times[-1], n_samples)
        vals, dvals = resample(traj, grid, derivative=True)
    m = grid.size
    if m < 5:
        raise ValueError("need at least 5 samples for the centered residual")
    h_rr = np.empty(m)
    rate = np.empty(m)
    for i in range(m):
        st = PhaseState(vals[i, :3 * n].reshape(n, 3),
                        vals[i, 3 * n:6 * n].reshape(n, 3), grid[i])
        acc = dvals[i, 3 * n:6 * n].reshape(n, 3)
        h_rr[i] = energy_rr(st, acc, sys, eps)
        rate[i] = dissipation_rate(acc, sys)
    dh = (h_rr[2:] - h_rr[:-2]) / (grid[2:] - grid[:-2])
    residual = dh + eps ** 1.5 * rate[1:-1]
    return grid[1:-1], residual, float(np.max(np.abs(residual)))


@dataclass(frozen=True)
class ComparisonNorms:
    """Sup norms of state differences on a common resampled grid."""

    sup_dr: float
    sup_du: float
    sup_dudot: float
    sup_dh_d: float
    window: tuple[float, float]
    n_samples: int


def compare(traj_a: Trajectory, traj_b: Trajectory,
            window: tuple[float, float] | None = None,
            sys: ParticleSystem | None = None,
            eps: float | None = None,
            n_samples: int = 400) -> ComparisonNorms:
    """Trajectory gap norms sup|dr|, sup|du|, sup|du/dt| (and sup|dH_D| when
    a ParticleSystem is supplied) over the overlap of the two spans."""
    lo = max(traj_a.times[0], traj_b.times[0])
    hi = min(traj_a.times[-1], traj_b.times[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    if not hi > lo:
        raise ValueError("trajectories do not overlap on the requested window")
    if traj_a.n_particles != traj_b.n_particles:
        raise ValueError("particle counts differ")
    n = traj_a.n_particles
    grid = np.linspace(lo, hi, n_samples)
    va, da = resample(traj_a, grid, derivative=True)
    vb, db = resample(traj_b, grid, derivative=True)

    def sup_block(arr_a, arr_b, sl):
        diff = (arr_a[:, sl] - arr_b[:, sl]).reshape(n_samples, n, 3)
        return float(np.max(np.linalg.norm(diff, axis=-1)))

    r_sl = slice(0, 3 * n)
    u_sl = slice(3 * n, 6 * n)
    sup_dr = sup_block(va, vb, r_sl)
    sup_du = sup_block(va, vb, u_sl)
    sup_dudot = sup_block(da, db, u_sl)
    sup_dh = float("nan")
    if sys is not None:
        e_a = traj_a.epsilon if eps is None else eps
        e_b = traj_b.epsilon if eps is None else eps
        h_a = np.array([energy_darwin(
            PhaseState(va[i, r_sl].reshape(n, 3), va[i, u_sl].reshape(n, 3)),
            sys, e_a) for i in range(n_samples)])
        h_b = np.array([energy_darwin(
            PhaseState(vb[i, r_sl].reshape(n, 3), vb[i, u_sl].reshape(n, 3)),
            sys, e_b) for i in range(n_samples)])
        sup_dh = float(np.max(np.abs(h_a - h_b)))
    return ComparisonNorms(sup_dr=sup_dr, sup_du=sup_du, sup_dudot=sup_dudot,
                           sup_dh_d=sup_dh, window=(float(lo), float(hi)),
                           n_samples=n_samples)


@dataclass(frozen=True)
class ConvergenceFit:
    """Least-squares power-law fit error ~ C * eps^slope in log-log."""

    epsilons: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    r_squared: float


def fit_order(epsilons, errors) -> ConvergenceFit:
    """Fitted log-log slope of errors against epsilons (>= 3 positive pairs)."""
    eps = np.asarray(epsilons, float)
    err = np.asarray(errors, float)
    if eps.size != err.size or eps.size < 3:
        raise ValueError("need at least 3 (epsilon, error) pairs")
    if np.any(eps <= 0.0) or np.any(err < 0.0):
        raise ValueError("epsilons must be positive and errors nonnegative")
    if np.any(err == 0.0):
        # zero errors carry no slope information; treat as exact degeneracy
        err = np.where(err == 0.0, np.finfo(float).tiny, err)
    x, y = np.log(eps), np.log(err)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), res, *_ = np.linalg.lstsq(A, y, rcond=None)
    y_hat = A @ np.array([slope, intercept])
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ConvergenceFit(epsilons=eps, errors=err, slope=float(slope),
                          intercept=float(intercept), r_squared=r2)
