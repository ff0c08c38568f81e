"""
meanvar-oed - Mean-variance Bayesian optimal experimental design

This package estimates the expected information gain and its variance across
outcomes by nested Monte Carlo, and optimizes the penalized objective
U - lambda * V over designs with Bayesian optimization.
"""

from ._version import __version__
from .estimators import EstimateReport, EstimatorConfig, estimate_objective
from .problem import ProblemDefinition, build_sample_bank

# Diffusion models and BO are imported from their modules:
# meanvar_oed.diffusion and meanvar_oed.bayes_opt
