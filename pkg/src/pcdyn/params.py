"""Model constants and base types for N charged particles coupled through
their fields: form factor, field-induced (electromagnetic) mass, effective
masses, the microscopic/Coulomb scale map, and comoving point-charge fields.

Units: c = 1 throughout, Heaviside-Lorentz charges, so the static pair
potential is e_a e_b / (4 pi d).

Fourier convention (fixed once, used everywhere): symmetric,

    fhat(k) = (2 pi)^(-3/2) * integral f(x) exp(-i k.x) d^3x.

With this convention the two electromagnetic-mass routes coincide exactly:

    m_e = 1/2 integral |phihat(k)|^2 k^-2 d^3k
        = 1/2 double-integral phi(x) phi(y) / (4 pi |x-y|) d^3x d^3y,

i.e. m_e equals the electrostatic self-energy of the charge profile (the
conversion factor between the k-space and x-space forms is 1; Parseval with
the Coulomb Green function 1/(4 pi |x|), whose transform is (2 pi)^(-3/2)/k^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

__all__ = [
    "FormFactor",
    "ParticleSystem",
    "PhaseState",
    "ScaleMap",
    "make_form_factor",
    "fourier_radial",
    "electromagnetic_mass",
    "effective_masses",
    "to_coulomb_scale",
    "to_microscopic_scale",
    "soliton_potential",
    "soliton_potential_gradient",
    "point_soliton_fields",
]

_QUAD_TOL = 1e-12


def _bump(t):
    """C-infinity bump exp(-1/(1-t^2)) on |t| < 1, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ti * ti))
    return out


@dataclass(frozen=True)
class FormFactor:
    """Smooth radial charge profile with compact support and unit total charge.

    profile(s) is the density at radius s; it vanishes for s >= support_radius
    and satisfies 4 pi int_0^R s^2 profile(s) ds = 1 (enforced numerically at
    construction, stored in `normalization`).
    """

    support_radius: float
    amplitude: float
    normalization: float = 1.0

    def profile(self, s):
        s = np.asarray(s, dtype=float)
        return self.amplitude * _bump(s / self.support_radius)

    __call__ = profile

    def shell_charge(self, s):
        """Charge per unit radius, q(s) = 4 pi s^2 profile(s)."""
        s = np.asarray(s, dtype=float)
        return 4.0 * math.pi * s * s * self.profile(s)


def make_form_factor(support_radius: float) -> FormFactor:
    """Normalized C-infinity bump profile of the given support radius."""
    if not support_radius > 0.0:
        raise ValueError(f"support_radius must be positive, got {support_radius}")
    R = float(support_radius)
    raw, _ = quad(lambda s: 4.0 * math.pi * s * s * _bump(np.array([s / R]))[0],
                  0.0, R, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200)
    ff = FormFactor(support_radius=R, amplitude=1.0 / raw)
    total, _ = quad(lambda s: float(ff.shell_charge(s)), 0.0, R,
                    epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200)
    return replace(ff, normalization=total)


def fourier_radial(ff: FormFactor, k: float) -> float:
    """Radial Fourier transform phihat(k) in the symmetric convention.

    For a radial profile,
        phihat(k) = sqrt(2/pi) int_0^R s^2 profile(s) sinc(k s) ds,
    so phihat(0) = (2 pi)^(-3/2) for a normalized profile.
    """
    if k < 0.0:
        raise ValueError("wavenumber must be nonnegative")
    R = ff.support_radius
    pref = math.sqrt(2.0 / math.pi)
    if k * R < 1e-8:
        val, _ = quad(lambda s: s * s * float(ff.profile(s)), 0.0, R,
                      epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200)
        return pref * val
    # oscillatory weight handled by quad's sin-weighted rule
    val, _ = quad(lambda s: s * float(ff.profile(s)) / k, 0.0, R,
                  weight="sin", wvar=k, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL,
                  limit=400)
    return pref * val


def electromagnetic_mass(ff: FormFactor, method: str = "fourier") -> float:
    """Field-induced mass of the charge profile (c = 1).

    method="fourier":   m_e = 1/2 int |phihat|^2 k^-2 d^3k = 2 pi int_0^inf phihat(k)^2 dk
    method="position":  m_e = 1/2 intint phi(x) phi(y) / (4 pi |x-y|), reduced by
                        the shell theorem to a double radial integral.

    The two routes are independent computations of the same quantity and are
    kept as a cross-checking pair; both scale as 1/R under dilation.
    """
    if method == "fourier":
        return _em_mass_fourier(ff)
    if method == "position":
        return _em_mass_position(ff)
    raise ValueError(f"unknown method {method!r}")


def _em_mass_fourier(ff: FormFactor) -> float:
    R = ff.support_radius
    # |phihat| decays sub-geometrically for the bump; beyond k ~ 400/R the
    # squared tail is below 1e-12 relative.
    k_max = 400.0 / R
    val, err = quad(lambda k: fourier_radial(ff, k) ** 2, 0.0, k_max,
                    epsabs=1e-14, epsrel=1e-11, limit=500)
    if not np.isfinite(val) or err > max(1e-10 * abs(val), 1e-13):
        raise ArithmeticError(
            f"k-space quadrature did not converge (value {val}, error {err})")
    return 2.0 * math.pi * val


def _em_mass_position(ff: FormFactor) -> float:
    # 1/2 intint phi phi / (4 pi |x-y|) with q(s) = 4 pi s^2 phi(s):
    #   m_e = (1/(8 pi)) int q(s) [ Q_in(s)/s + int_s^R q(t)/t dt ] ds
    R = ff.support_radius

    def inner(s):
        if s == 0.0:
            return 0.0
        q_in, _ = quad(lambda t: float(ff.shell_charge(t)), 0.0, s,
                       epsabs=1e-13, epsrel=1e-11, limit=200)
        q_out, _ = quad(lambda t: float(ff.shell_charge(t)) / t, s, R,
                        epsabs=1e-13, epsrel=1e-11, limit=200)
        return float(ff.shell_charge(s)) * (q_in / s + q_out)

    val, err = quad(inner, 0.0, R, epsabs=1e-13, epsrel=1e-10, limit=200)
    if not np.isfinite(val):
        raise ArithmeticError("position-space quadrature did not converge")
    return val / (8.0 * math.pi)


def effective_masses(m_bare: float, e: float, m_e: float) -> tuple[float, float]:
    """Renormalized masses (m, m_star) of a particle of bare mass m_bare and
    charge e:  m = m_bare + (4/3) e^2 m_e,  m_star = m_bare + (16/15) e^2 m_e."""
    if m_bare < 0.0 or m_e < 0.0:
        raise ValueError("bare mass and electromagnetic mass must be nonnegative")
    m = m_bare + (4.0 / 3.0) * e * e * m_e
    m_star = m_bare + (16.0 / 15.0) * e * e * m_e
    if m <= 0.0:
        raise ValueError("assembled effective mass is not positive")
    return m, m_star


@dataclass(frozen=True)
class ParticleSystem:
    """Charges and (effective) masses of the N-particle system.

    masses and star_masses are the renormalized inertias entering the
    dynamics.  When built via `from_bare`, bare_masses/em_mass are stored and
    m = m_bare + (4/3) e^2 m_e, m* = m_bare + (16/15) e^2 m_e hold exactly.
    `direct` takes (m, m*) at face value (point-particle parameterization).

    epsilon is the scenario's scale ratio; dynamics routines take it as an
    explicit argument, this field records the scenario default.
    """

    charges: np.ndarray
    masses: np.ndarray
    star_masses: np.ndarray
    epsilon: float = 1.0
    bare_masses: np.ndarray | None = None
    em_mass: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "charges", np.atleast_1d(np.asarray(self.charges, float)))
        object.__setattr__(self, "masses", np.atleast_1d(np.asarray(self.masses, float)))
        object.__setattr__(self, "star_masses", np.atleast_1d(np.asarray(self.star_masses, float)))
        if self.bare_masses is not None:
            object.__setattr__(self, "bare_masses", np.atleast_1d(np.asarray(self.bare_masses, float)))
        if not (self.charges.shape == self.masses.shape == self.star_masses.shape):
            raise ValueError("charges, masses, star_masses must have equal length")
        if np.any(self.masses <= 0.0):
            raise ValueError("effective masses must be positive")
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @classmethod
    def from_bare(cls, charges, bare_masses, em_mass: float, epsilon: float = 1.0):
        charges = np.atleast_1d(np.asarray(charges, float))
        bare = np.atleast_1d(np.asarray(bare_masses, float))
        pairs = [effective_masses(mb, e, em_mass) for mb, e in zip(bare, charges)]
        m = np.array([p[0] for p in pairs])
        ms = np.array([p[1] for p in pairs])
        return cls(charges=charges, masses=m, star_masses=ms, epsilon=epsilon,
                   bare_masses=bare, em_mass=em_mass)

    @classmethod
    def direct(cls, charges, masses, star_masses=None, epsilon: float = 1.0):
        charges = np.atleast_1d(np.asarray(charges, float))
        masses = np.atleast_1d(np.asarray(masses, float))
        if star_masses is None:
            star_masses = masses.copy()
        return cls(charges=charges, masses=masses,
                   star_masses=np.atleast_1d(np.asarray(star_masses, float)),
                   epsilon=epsilon)

    @property
    def n(self) -> int:
        return self.charges.size

    @property
    def e_squared_total(self) -> float:
        return float(np.sum(self.charges ** 2))

    def charge_mass_ratios(self) -> np.ndarray:
        return self.charges / self.masses


@dataclass(frozen=True)
class PhaseState:
    """Positions and velocities of all N particles at one instant."""

    positions: np.ndarray   # (N, 3)
    velocities: np.ndarray  # (N, 3)
    time: float = 0.0

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.positions, float))
        u = np.atleast_2d(np.asarray(self.velocities, float))
        if r.shape != u.shape or r.shape[1] != 3:
            raise ValueError("positions and velocities must both be (N, 3)")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(u))):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "positions", r)
        object.__setattr__(self, "velocities", u)

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class ScaleMap:
    """Microscopic <-> Coulomb change of variables at scale ratio epsilon:

        r_coulomb = eps * q,   u_coulomb = eps^(-1/2) * v,   t_coulomb = eps^(3/2) * t.
    """

    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    def to_coulomb(self, state: PhaseState) -> PhaseState:
        eps = self.epsilon
        return PhaseState(eps * state.positions,
                          state.velocities / math.sqrt(eps),
                          eps ** 1.5 * state.time)

    def to_microscopic(self, state: PhaseState) -> PhaseState:
        eps = self.epsilon
        return PhaseState(state.positions / eps,
                          math.sqrt(eps) * state.velocities,
                          state.time / eps ** 1.5)


def to_coulomb_scale(state: PhaseState, epsilon: float) -> PhaseState:
    return ScaleMap(epsilon).to_coulomb(state)


def to_microscopic_scale(state: PhaseState, epsilon: float) -> PhaseState:
    return ScaleMap(epsilon).to_microscopic(state)


def _check_soliton_args(v, x):
    v = np.asarray(v, float)
    x = np.asarray(x, float)
    if v.shape != (3,) or x.shape != (3,):
        raise ValueError("v and x must be 3-vectors")
    if np.dot(v, v) >= 1.0:
        raise ValueError("|v| must be below 1 (= c)")
    if np.dot(x, x) == 0.0:
        raise ValueError("field point must be away from the charge center")
    return v, x


def soliton_potential(v, x) -> float:
    """Comoving potential profile of a uniformly moving point charge,

        zeta_v(x) = [ (1 - v^2) x^2 + (x.v)^2 ]^(-1/2);

    the physical potential is phi_v = (e / 4 pi) zeta_v.  At v = 0 this is
    the Coulomb profile 1/|x|.
    """
    v, x = _check_soliton_args(v, x)
    d = (1.0 - v @ v) * (x @ x) + (x @ v) ** 2
    return 1.0 / math.sqrt(d)


def soliton_potential_gradient(v, x) -> np.ndarray:
    """Analytic spatial gradient of zeta_v."""
    v, x = _check_soliton_args(v, x)
    v2 = v @ v
    d = (1.0 - v2) * (x @ x) + (x @ v) ** 2
    return -d ** (-1.5) * ((1.0 - v2) * x + (x @ v) * v)


def point_soliton_fields(e: float, v, x) -> tuple[np.ndarray, np.ndarray]:
    """Comoving electric and magnetic fields of a point charge e at velocity v:

        E_v = -grad phi_v + (v . grad phi_v) v,     B_v = -v x grad phi_v,

    with phi_v = (e / 4 pi) zeta_v and the gradient taken analytically.
    """
    grad_phi = (e / (4.0 * math.pi)) * soliton_potential_gradient(v, x)
    v = np.asarray(v, float)
    E = -grad_phi + (v @ grad_phi) * v
    B = -np.cross(v, grad_phi)
    return E, B
