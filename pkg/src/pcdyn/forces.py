"""Right-hand sides of the effective N-charge models on the Coulomb scale.

Model hierarchy (eps is the scale ratio; velocity terms carry explicit eps
weights, so eps = 0 reduces everything to plain Coulomb forces):

  coulomb_rhs      m_a du_a/dt = (e_a/4pi) sum_b e_b xi_ab / |xi_ab|^3

  darwin_rhs       M_a(u_a, eps) du_a/dt = G_a(r, u, du/dt, eps); the force
                   G_a is linear in the accelerations, so one dense
                   3N x 3N LU solve resolves the implicitness exactly.

  rr_reduced_rhs   Darwin plus the order-reduced radiation-reaction force
                   eps^(3/2) (e_a/12pi) * S(r, u), where S sums dipole terms
                   (e_b e_b'/4pi)(e_b/m_b - e_b'/m_b')[...] over ordered
                   pairs; it vanishes identically for equal charge-to-mass
                   ratios.

All functions are pure; workspaces are allocated per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import ParticleSystem, PhaseState

__all__ = [
    "CoincidentParticlesError",
    "SingularAssemblyError",
    "PairGeometry",
    "coulomb_rhs",
    "mass_matrix",
    "mass_matrix_apply",
    "g_alpha",
    "darwin_assemble",
    "darwin_rhs",
    "rr_dissipative_sum",
    "rr_reduced_rhs",
    "darwin_rhs_fixed_point",
    "model_rhs",
    "MODELS",
]

FOUR_PI = 4.0 * math.pi

# refuse acceleration solves when the assembled matrix is this ill-conditioned
COND_LIMIT = 1e12


class CoincidentParticlesError(ValueError):
    """Two particles sit at the same point, the pair force is undefined."""


class SingularAssemblyError(np.linalg.LinAlgError):
    """The acceleration system is (numerically) singular."""

    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(f"acceleration matrix condition estimate {cond:.3e} "
                         f"exceeds {COND_LIMIT:.0e}")


@dataclass(frozen=True)
class PairGeometry:
    """Separation vectors xi[a, b] = r_a - r_b and distances for all pairs.

    The diagonal distance is set to inf so vectorized expressions with
    1/dist silently drop self-terms.
    """

    xi: np.ndarray    # (N, N, 3)
    dist: np.ndarray  # (N, N), inf on the diagonal

    @classmethod
    def of(cls, positions: np.ndarray) -> "PairGeometry":
        r = np.atleast_2d(np.asarray(positions, float))
        xi = r[:, None, :] - r[None, :, :]
        dist = np.linalg.norm(xi, axis=-1)
        n = r.shape[0]
        off = ~np.eye(n, dtype=bool)
        if np.any(dist[off] == 0.0):
            a, b = np.argwhere(off & (dist == 0.0))[0]
            raise CoincidentParticlesError(
                f"particles {a} and {b} coincide at {r[a]}")
        dist = dist.copy()
        np.fill_diagonal(dist, np.inf)
        return cls(xi=xi, dist=dist)


def coulomb_rhs(state: PhaseState, sys: ParticleSystem) -> np.ndarray:
    """Coulomb accelerations, (N, 3)."""
    geom = PairGeometry.of(state.positions)
    e = sys.charges
    w = (e[:, None] * e[None, :] / FOUR_PI / sys.masses[:, None])[..., None]
    return np.sum(w * geom.xi / geom.dist[..., None] ** 3, axis=1)


def mass_matrix(u, m: float, m_star: float, eps: float) -> np.ndarray:
    """Velocity-dependent 3x3 inertia block
    M(u, eps) = (m + eps/2 m* u^2) I + eps m* u (x) u."""
    u = np.asarray(u, float)
    return ((m + 0.5 * eps * m_star * (u @ u)) * np.eye(3)
            + eps * m_star * np.outer(u, u))


def mass_matrix_apply(u, z, m: float, m_star: float, eps: float) -> np.ndarray:
    """M(u, eps) z without forming the matrix."""
    u = np.asarray(u, float)
    z = np.asarray(z, float)
    return (m + 0.5 * eps * m_star * (u @ u)) * z + eps * m_star * (u @ z) * u


def _g_alpha_geom(charges, xi, dist, u_eff, w, eps) -> np.ndarray:
    """Velocity-corrected interaction force for explicit pair geometry.

    u_eff may be a regularized copy of the velocities; the accelerations w
    enter linearly and are never regularized.  Passing regularized xi/dist
    yields the clamped variant of the force.
    """
    n = charges.size
    out = np.zeros((n, 3))
    for a in range(n):
        acc = np.zeros(3)
        ua = u_eff[a]
        for b in range(n):
            if b == a:
                continue
            x = xi[a, b]
            d = dist[a, b]
            ub, wb = u_eff[b], w[b]
            term = x / d**3
            term = term + eps * (
                -wb / (2.0 * d)
                - (wb @ x) * x / (2.0 * d**3)
                + (ub @ ub) * x / (2.0 * d**3)
                - 3.0 * (ub @ x) ** 2 * x / (2.0 * d**5)
                - (ua @ ub) * x / d**3
                + (ua @ x) * ub / d**3
            )
            acc += charges[b] * term
        out[a] = charges[a] / FOUR_PI * acc
    return out


def g_alpha(state: PhaseState, accel_guess: np.ndarray, sys: ParticleSystem,
            eps: float) -> np.ndarray:
    """Full interaction force G_a(r, u, du/dt, eps), (N, 3).

    Contains the Coulomb term plus eps-weighted corrections in the
    accelerations, u_b^2, (u_b . xi)^2, u_a . u_b and (u_a . xi) u_b; at
    eps = 0 it reduces exactly to the Coulomb term.
    """
    geom = PairGeometry.of(state.positions)
    w = np.atleast_2d(np.asarray(accel_guess, float))
    return _g_alpha_geom(sys.charges, geom.xi, geom.dist,
                         state.velocities, w, eps)


def darwin_assemble(state: PhaseState, sys: ParticleSystem, eps: float
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Linear system A w = b for the Darwin accelerations w (flattened 3N).

    Diagonal blocks are the inertia matrices M_a(u_a, eps); off-diagonal
    blocks carry the acceleration coupling of the interaction force, moved
    to the left-hand side:

        block(a, b) = eps e_a e_b / (8 pi) [ I/|xi| + xi (x) xi / |xi|^3 ].

    b is the acceleration-independent part of G_a.  The matrix is symmetric.
    """
    geom = PairGeometry.of(state.positions)
    n = sys.n
    e, u = sys.charges, state.velocities
    A = np.zeros((3 * n, 3 * n))
    for a in range(n):
        A[3*a:3*a+3, 3*a:3*a+3] = mass_matrix(u[a], sys.masses[a],
                                              sys.star_masses[a], eps)
        for b in range(n):
            if b == a:
                continue
            x, d = geom.xi[a, b], geom.dist[a, b]
            coef = eps * e[a] * e[b] / (8.0 * math.pi)
            A[3*a:3*a+3, 3*b:3*b+3] = coef * (np.eye(3) / d
                                              + np.outer(x, x) / d**3)
    b_vec = _g_alpha_geom(e, geom.xi, geom.dist, u, np.zeros((n, 3)), eps)
    return A, b_vec.reshape(-1)


def _checked_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularAssemblyError(cond)
    return np.linalg.solve(A, b)


def darwin_rhs(state: PhaseState, sys: ParticleSystem, eps: float) -> np.ndarray:
    """Darwin accelerations by direct dense solve, (N, 3).

    At eps = 0 this equals coulomb_rhs to machine precision."""
    A, b = darwin_assemble(state, sys, eps)
    return _checked_solve(A, b).reshape(-1, 3)


def rr_dissipative_sum(state: PhaseState, sys: ParticleSystem) -> np.ndarray:
    """Dipole difference sum

        S = sum_{b != b'} (e_b e_b'/4pi)(e_b/m_b - e_b'/m_b')
            [ (u_b - u_b')/|xi|^3 - 3 (xi.(u_b - u_b')) xi / |xi|^5 ],

    a single 3-vector.  Zero when all charge-to-mass ratios agree and when
    all velocities agree."""
    geom = PairGeometry.of(state.positions)
    e, m, u = sys.charges, sys.masses, state.velocities
    out = np.zeros(3)
    n = sys.n
    for b in range(n):
        for bp in range(n):
            if bp == b:
                continue
            x, d = geom.xi[b, bp], geom.dist[b, bp]
            du = u[b] - u[bp]
            ratio = e[b] / m[b] - e[bp] / m[bp]
            out += (e[b] * e[bp] / FOUR_PI) * ratio * (
                du / d**3 - 3.0 * (x @ du) * x / d**5)
    return out


def rr_reduced_rhs(state: PhaseState, sys: ParticleSystem, eps: float) -> np.ndarray:
    """Order-reduced radiation-reaction accelerations, (N, 3).

    The Darwin solve with the explicit dissipative force
    eps^(3/2) (e_a/12pi) S(r, u) added to the right-hand side.  Identical to
    darwin_rhs when the charge-to-mass ratios are alpha-independent."""
    A, b = darwin_assemble(state, sys, eps)
    S = rr_dissipative_sum(state, sys)
    extra = (eps ** 1.5 / (12.0 * math.pi)) * np.outer(sys.charges, S)
    return _checked_solve(A, b + extra.reshape(-1)).reshape(-1, 3)


def _mass_apply_inverse(u, z, m, m_star, eps):
    # (a I + c u u^t)^-1 z with a = m + eps/2 m* u^2, c = eps m*
    a = m + 0.5 * eps * m_star * (u @ u)
    c = eps * m_star
    return (z - c * (u @ z) * u / (a + c * (u @ u))) / a


def darwin_rhs_fixed_point(state: PhaseState, sys: ParticleSystem, eps: float,
                           tol: float = 1e-13, max_iter: int = 500,
                           damping: float = 1.0, rr: bool = False
                           ) -> tuple[np.ndarray, int, bool]:
    """Damped fixed-point iteration w <- (1-d) w + d M^-1 G(r, u, w) for the
    Darwin (or radiation-reaction, rr=True) accelerations.

    Returns (w, iterations, converged).  Serves as an independent check of
    the direct solve; contraction requires eps small."""
    geom = PairGeometry.of(state.positions)
    e, u = sys.charges, state.velocities
    extra = np.zeros((sys.n, 3))
    if rr:
        S = rr_dissipative_sum(state, sys)
        extra = (eps ** 1.5 / (12.0 * math.pi)) * np.outer(e, S)
    w = np.zeros((sys.n, 3))
    for it in range(1, max_iter + 1):
        g = _g_alpha_geom(e, geom.xi, geom.dist, u, w, eps) + extra
        w_new = np.stack([
            _mass_apply_inverse(u[a], g[a], sys.masses[a],
                                sys.star_masses[a], eps)
            for a in range(sys.n)])
        w_new = (1.0 - damping) * w + damping * w_new
        step = np.max(np.abs(w_new - w))
        w = w_new
        if step <= tol * max(1.0, np.max(np.abs(w))):
            return w, it, True
    return w, max_iter, False


MODELS = ("coulomb", "darwin", "rr_reduced")


def model_rhs(model: str):
    """Acceleration function (state, sys, eps) -> (N, 3) for a model name."""
    if model == "coulomb":
        return lambda state, sys, eps: coulomb_rhs(state, sys)
    if model == "darwin":
        return darwin_rhs
    if model == "rr_reduced":
        return rr_reduced_rhs
    raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
