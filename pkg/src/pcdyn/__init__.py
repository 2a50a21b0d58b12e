"""Effective dynamics of N charged particles: Coulomb (order 0), Darwin
(order 1), and radiation reaction (order 1.5), with the transformed
third-order system, its slow manifold, and claim-checking diagnostics."""

from .params import (FormFactor, ParticleSystem, PhaseState, ScaleMap,
                     make_form_factor, fourier_radial, electromagnetic_mass,
                     effective_masses, to_coulomb_scale, to_microscopic_scale,
                     soliton_potential, soliton_potential_gradient,
                     point_soliton_fields)
from .forces import (CoincidentParticlesError, SingularAssemblyError,
                     PairGeometry, coulomb_rhs, mass_matrix,
                     mass_matrix_apply, g_alpha, darwin_assemble, darwin_rhs,
                     rr_dissipative_sum, rr_reduced_rhs,
                     darwin_rhs_fixed_point, model_rhs, MODELS)
from .manifold import (apply_P, apply_A, apply_At, a_matrix, solve_A,
                       m0_scalar_matrix, m0_matrix, m0_det_closed_form,
                       Regularization, regularize, h0, h0_time_derivative,
                       constraint_blocks, solve_constraint, phi_full,
                       DAEState, third_order_rhs, manifold_init,
                       fast_jacobian, growth_coefficient,
                       growth_coefficient_slaved, dipole_sum_formula)
from .integrate import (StepperConfig, CollisionGuard, Trajectory,
                        integrate_model, integrate_dae, resample)
from .diagnostics import (energy_coulomb, energy_darwin, energy_rr,
                          canonical_momentum, dissipation_rate, EnergyReport,
                          energy_report, trajectory_energy_series,
                          dissipation_identity_residual, ComparisonNorms,
                          compare, ConvergenceFit, fit_order)

__version__ = "0.1.0"
