"""Disentangle superimposed sources with per-source VAEs and exact
enumeration over Bernoulli presence states.

A mixture observation is modeled as the sum of per-source decoder outputs,
switched by binary presence variables and blurred by Laplace noise.
Inference enumerates every presence state exactly while per-source Gaussian
encoders amortize the continuous latents.
"""

__version__ = "0.1.0"

from .checkpoint import load_expert, load_model, save_expert, save_model
from .data import MixtureDataset, SourcePool, compose_mixtures, make_ridge_pool
from .inference import EncoderParams, discrete_posterior, predict_states
from .metrics import EvalReport, evaluate_model
from .model import GenerativeParams, enumerate_states, sample_dataset
from .training import PretrainConfig, TrainConfig, pretrain_expert, train

__all__ = [
    "EncoderParams",
    "EvalReport",
    "GenerativeParams",
    "MixtureDataset",
    "PretrainConfig",
    "SourcePool",
    "TrainConfig",
    "compose_mixtures",
    "discrete_posterior",
    "enumerate_states",
    "evaluate_model",
    "load_expert",
    "load_model",
    "make_ridge_pool",
    "pretrain_expert",
    "predict_states",
    "sample_dataset",
    "save_expert",
    "save_model",
    "train",
    "__version__",
]
