"""Boundary-integral solver for viscous/porous transmission flow.

Subpackages are organized bottom-up: geometry (charts, connections,
deformation), boundary (closed curves, densities, fractional norms),
kernels (fundamental-solution pairs), potentials (quadrature and layer
operators), solver_linear (the transmission systems), solver_nonlinear
(the fixed-point loop), and experiments/cli (reproducible runs).
"""

__version__ = "0.1.0"

from .boundary import (BoundaryCurve, BoundaryField, FluxFreeField,
                       build_curve, field_from_csv, field_to_csv, flux,
                       preset_curve, project_flux_free, require_flux_free,
                       sobolev_norm)
from .geometry import (ChristoffelTable, MetricChart, SymTensor2,
                       VectorField, christoffel, convection,
                       covariant_derivative, deformation, flat_chart,
                       killing_residual, lie_bracket)
from .kernels import (KernelPair, brinkman_2d, from_config, stokes_2d,
                      torus_brinkman, torus_stokes_mean_zero)
from .potentials import (FieldEvaluator, LayerOperators, VolumeQuadrature,
                         assemble_layer_operators, combine_evaluators,
                         conormal_jump_check, dlayer_conormal_difference,
                         double_layer_eval, newtonian_eval,
                         single_layer_eval)
from .solver_linear import (DirichletField, ScaledSolution, SideField,
                            SystemU, TransmissionData,
                            TransmissionSolution, VolumeCoefficient,
                            assemble_system, conormal_derivative,
                            divergence_residual, energy_chain,
                            green_identity_residual, isomorphism_witness,
                            mu_scaling_transform, reduce_rhs,
                            solve_brinkman_transmission, solve_dirichlet,
                            solve_stokes_transmission, variant_residuals)
