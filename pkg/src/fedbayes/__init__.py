"""Personalized federated estimation and learning with population priors."""

from .core import (BetaPrior, ClientDataset, DiscretePrior, GaussianMixturePrior, GaussianPrior,
                   RngContract, ScalarPrior, SyntheticDataset, paper_linreg_prior,
                   sample_bernoulli_population, sample_gaussian_population,
                   sample_mixture_population, sample_regression_population)
from .errors import (ConfigError, DivergenceError, FedBayesError, NoBudgetError, OrderError,
                     ParameterError, RangeError)
from .privacy import ClipSpec, MechanismSpec, RdpCurve, adaped_rdp, rdp_to_dp
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BetaPrior", "ClientDataset", "DiscretePrior", "GaussianMixturePrior", "GaussianPrior",
    "RngContract", "ScalarPrior", "SyntheticDataset", "paper_linreg_prior",
    "sample_bernoulli_population", "sample_gaussian_population", "sample_mixture_population",
    "sample_regression_population",
    "ConfigError", "DivergenceError", "FedBayesError", "NoBudgetError", "OrderError",
    "ParameterError", "RangeError",
    "ClipSpec", "MechanismSpec", "RdpCurve", "adaped_rdp", "rdp_to_dp",
    "ExperimentConfig", "run_experiment",
]
