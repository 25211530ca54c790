"""Bayes-optimal learning of extensive-width two-layer networks.

Theory side: Hermite-basis activations, discretised readout priors, the
free-probability spectral layer (weighted Marchenko-Pastur, free additive
convolution with the semicircle, matrix-denoising mmse and its mutual
information), scalar potentials and the replica-symmetric saddle-point
solver with branch selection.

Algorithm side: the GAMP-RIE polynomial-time learner and Monte-Carlo
posterior samplers (Metropolis for binary weights, HMC for Gaussian ones)
used to cross-validate the theory at desk scale.
"""

from .activations import ActivationSpec, get_activation, hermite_coefficients
from .readouts import ReadoutLaw, make_readout
from .spectral import SpectralDensity, SpectralTable, build_mmse_table
from .potentials import ChannelSpec, PriorKind, posterior_mean_bracket, psi_out, psi_w
from .saddle import SaddleContext, SaddleSolution, solve_branches

__all__ = [
    "ActivationSpec",
    "ChannelSpec",
    "PriorKind",
    "ReadoutLaw",
    "SaddleContext",
    "SaddleSolution",
    "SpectralDensity",
    "SpectralTable",
    "build_mmse_table",
    "get_activation",
    "hermite_coefficients",
    "make_readout",
    "posterior_mean_bracket",
    "psi_out",
    "psi_w",
    "solve_branches",
]

__version__ = "0.1.0"
