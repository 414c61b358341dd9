"""Supervised calibration for few-shot in-context classifiers.

Learns a per-class affine map of a model's log-odds from surrogate data built
out of the prompt's own demonstrations, with a context-invariance penalty, a
directional trust-region constraint and two-level ensembling over
sub-contexts. Label-marginal baselines and a synthetic biased model are
included for comparison and ground-truth checks.
"""

from .backend import (
    BackendConfig, HTTPBackend, MockBackend, MockModelSpec, PromptTemplate,
    load_templates, mock_true_posterior, render_prompt,
)
from .baselines import BaselineConfig, base_predict, bc_predict, cc_predict, dc_predict
from .core import (
    CalibrationParams, Context, Exemplar, LabelSpace, apply_affine, calibrated_dist,
    logits_from_probs, predict_label, probs_from_logits,
)
from .ensemble import EnsembleConfig, EnsembleModel, predict, predict_label_sc, train_ensemble
from .harness import Dataset, ExperimentSpec, load_dataset, macro_f1, run_experiment, sample_shots
from .objective import ObjectiveConfig, inv_penalty, nll, sym_xent, total_objective, trust_region_value
from .solver import FitResult, SolverConfig, fit, in_sample_accuracy, tau_from_accuracy
from .surrogate import ContextBudget, SurrogateDataset, class_coverage, enumerate_contexts, generate_surrogate

__version__ = "0.1.0"

__all__ = [
    "BackendConfig", "HTTPBackend", "MockBackend", "MockModelSpec", "PromptTemplate",
    "load_templates", "mock_true_posterior", "render_prompt", "BaselineConfig", "base_predict",
    "bc_predict", "cc_predict", "dc_predict", "CalibrationParams", "Context", "Exemplar",
    "LabelSpace", "apply_affine", "calibrated_dist", "logits_from_probs", "predict_label",
    "probs_from_logits", "EnsembleConfig", "EnsembleModel", "predict", "predict_label_sc",
    "train_ensemble", "Dataset", "ExperimentSpec", "load_dataset", "macro_f1", "run_experiment",
    "sample_shots", "ObjectiveConfig", "inv_penalty", "nll", "sym_xent", "total_objective",
    "trust_region_value", "FitResult", "SolverConfig", "fit", "in_sample_accuracy",
    "tau_from_accuracy", "ContextBudget", "SurrogateDataset", "class_coverage",
    "enumerate_contexts", "generate_surrogate",
]
