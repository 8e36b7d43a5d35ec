"""Adversarial perturbation toolkit: five targeted attacks, adversarial
training, and an attack-vs-defense accuracy grid at desk scale."""

from advtransfer.errors import InvalidArgument, DatasetFormatError, GridCellError
from advtransfer.geometry import Family, PerturbationBudget
from advtransfer.model import Classifier, LabeledDataset, TrainSchedule
from advtransfer.attacks import AttackResult, run_attack, evaluate_accuracy

__all__ = [
    "InvalidArgument",
    "DatasetFormatError",
    "GridCellError",
    "Family",
    "PerturbationBudget",
    "Classifier",
    "LabeledDataset",
    "TrainSchedule",
    "AttackResult",
    "run_attack",
    "evaluate_accuracy",
]

__version__ = "0.1.0"
