"""Stationary states and phase transitions of a mean-field self-propelled alignment model.

Submodules
----------
model        potential, minimiser, stationary density, free energy
quadrature   shifted adaptive integrals against exp(-P_u / D)
consistency  self-consistency map H(u, D), its roots and the critical noise
asymptotics  small-noise Laplace coefficients and convergence checks
particle     Euler-Maruyama particle ensembles
cli          command-line front end
"""
from .asymptotics import coefficients, expansion_check, moment_table
from .consistency import (critical_noise, evaluate_dH_dD, evaluate_dH_du, evaluate_H, evaluate_point,
                          find_positive_root, phase_scan, trace_bifurcation)
from .errors import (AmbiguousBracketError, BlowUpError, NoSignChangeError, QuadratureError,
                     SupportMismatchError)
from .model import ModelParams, free_energy, positive_minimum, potential_value
from .particle import InitialLaw, SimConfig, preset_config, run_ensemble
from .quadrature import QuadratureConfig, partition_function, stationary_density

__version__ = "0.1.0"
