"""Hybrid variational inference and Hamiltonian Monte Carlo for Bayesian neural networks.

Mean-field VI gives a cheap Gaussian posterior; a variance-based sensitivity
score picks the parameters that matter for the predictive spread; HMC then
samples only those, with the rest frozen at their VI means.
"""

__version__ = "0.1.0"

from .errors import ConfigurationError, NumericalError, QualityGateError, VIHMCError  # noqa: E402

__all__ = ["__version__", "ConfigurationError", "NumericalError", "QualityGateError", "VIHMCError"]
