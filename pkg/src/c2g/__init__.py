"""Causal two-groups (C2G) models for selecting latent treatment responders.

Two estimators are provided: :class:`AdditiveC2G`, a semi-parametric model
assuming additive outcome noise, and :class:`NonparametricC2G`, which makes no
shape assumptions and reports conservative posteriors and estimand intervals.
Both expose a scikit-learn style ``fit`` / ``select`` API. Supporting modules
implement kernel ridge regression with GCV tuning, random Fourier features,
predictive-recursion density estimation, nearest-neighbor conditional density
estimation with bootstrap envelopes, selection procedures, and synthetic data
generators.
"""

from .dataset import Dataset, TreatmentSplit, load_dataset, save_dataset, split_by_treatment
from .kernels import KernelRidgeGCV, RandomFourierFeatures, rbf_kernel
from .density import NearestNeighborCDE, PredictiveRecursionDensity, bootstrap_envelopes
from .selection import (
    PosteriorScores,
    SelectionResult,
    bh_procedure,
    fdr_metric,
    frequentist_pvalues,
    jaccard_intervals,
    power_metric,
    select_by_average,
    valid_power,
)
from .additive import AdditiveC2G
from .nonparametric import EstimandReport, NonparametricC2G, OracleC2G, conservative_pi, empirical_control
from .simulate import GeneratorTruth, gen_additive, gen_confounded, gen_nonadditive, true_posterior

__all__ = [
    "AdditiveC2G",
    "Dataset",
    "EstimandReport",
    "GeneratorTruth",
    "KernelRidgeGCV",
    "NearestNeighborCDE",
    "NonparametricC2G",
    "OracleC2G",
    "PosteriorScores",
    "PredictiveRecursionDensity",
    "RandomFourierFeatures",
    "SelectionResult",
    "TreatmentSplit",
    "bh_procedure",
    "bootstrap_envelopes",
    "conservative_pi",
    "empirical_control",
    "fdr_metric",
    "frequentist_pvalues",
    "gen_additive",
    "gen_confounded",
    "gen_nonadditive",
    "jaccard_intervals",
    "load_dataset",
    "power_metric",
    "rbf_kernel",
    "save_dataset",
    "select_by_average",
    "split_by_treatment",
    "true_posterior",
    "valid_power",
]

__version__ = "0.1.0"
