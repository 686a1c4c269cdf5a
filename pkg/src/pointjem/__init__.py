"""Joint energy-based point cloud classifier and generator."""

__version__ = "0.1.0"

from .energy import (
    LossBreakdown,
    class_probabilities,
    classification_loss,
    energy,
    energy_input_gradient,
    forward_logits,
    generative_loss,
    init_params,
)
from .estimator import JointEnergyPointClassifier
from .netcore import Activation, ContractViolation, NetworkParams
from .optim import Adam, SamConfig, sam_perturbation, sam_step
from .sampler import InitStats, ReplayBuffer, SgldConfig, run_chain, sgld_step
from .trainer import TrainConfig, Trainer, evaluate_classifier, generate_samples

__all__ = [
    "Activation",
    "Adam",
    "ContractViolation",
    "InitStats",
    "JointEnergyPointClassifier",
    "LossBreakdown",
    "NetworkParams",
    "ReplayBuffer",
    "SamConfig",
    "SgldConfig",
    "TrainConfig",
    "Trainer",
    "class_probabilities",
    "classification_loss",
    "energy",
    "energy_input_gradient",
    "evaluate_classifier",
    "forward_logits",
    "generate_samples",
    "generative_loss",
    "init_params",
    "run_chain",
    "sam_perturbation",
    "sam_step",
    "sgld_step",
]
