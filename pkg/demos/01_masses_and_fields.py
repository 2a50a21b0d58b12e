"""Charge profile, electromagnetic mass, effective masses, comoving fields.

A smooth compactly supported charge profile carries field energy, which
renormalizes the bare particle masses.  The induced mass m_e can be computed
two independent ways: a wavenumber integral of the squared profile transform,
or the electrostatic self-energy in position space.  Both scale as 1/R under
dilation of the profile.
"""

import numpy as np

from pcdyn import (effective_masses, electromagnetic_mass, fourier_radial,
                   make_form_factor, point_soliton_fields, soliton_potential)

print("=== electromagnetic mass, two quadrature routes ===")
for R in (0.5, 1.0, 2.0, 4.0):
    ff = make_form_factor(R)
    mk = electromagnetic_mass(ff, method="fourier")
    mx = electromagnetic_mass(ff, method="position")
    print(f"  R = {R:3.1f}:  m_e(k-space) = {mk:.10f}   "
          f"m_e(x-space) = {mx:.10f}   m_e * R = {mk * R:.10f}")

print("\n=== profile transform ===")
ff = make_form_factor(1.0)
print(f"  phihat(0)      = {fourier_radial(ff, 0.0):.8f}"
      f"   (the convention constant (2 pi)^-1.5 = {(2*np.pi)**-1.5:.8f})")
print(f"  phihat(100)/phihat(0) = "
      f"{fourier_radial(ff, 100.0) / fourier_radial(ff, 0.0):.2e}"
      "   (fast decay: the profile is smooth)")

print("\n=== effective masses ===")
m_e = electromagnetic_mass(ff)
for m_bare, e in [(1.0, 1.0), (1.0, -2.0), (0.0, 1.0)]:
    m, m_star = effective_masses(m_bare, e, m_e)
    print(f"  bare {m_bare:3.1f}, charge {e:+.1f}:  m = {m:.6f}, "
          f"m* = {m_star:.6f}")

print("\n=== comoving point-charge fields ===")
v = np.array([0.6, 0.0, 0.0])
for x in (np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0, 0.0])):
    zeta = soliton_potential(v, x)
    E, B = point_soliton_fields(1.0, v, x)
    print(f"  x = {x}:  zeta = {zeta:.6f}, |E| = {np.linalg.norm(E):.6f}, "
          f"|B| = {np.linalg.norm(B):.6f}, B.v = {B @ v:+.2e}")
print("  (B is always perpendicular to the motion)")
