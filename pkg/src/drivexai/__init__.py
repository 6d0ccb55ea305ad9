"""Decision-aware multi-task action/reason prediction for driving scenes."""
from .labels import ACTIONS, REASONS, DecisionConfig, PairMatrix, decide, explanation_defined, joint_expand, load_pair_matrix
from .metrics import MetricsReport, f1_mean, f1_overall, f1_sample, joint_f1

__version__ = "0.1.0"

__all__ = [
    "ACTIONS",
    "REASONS",
    "DecisionConfig",
    "PairMatrix",
    "decide",
    "explanation_defined",
    "joint_expand",
    "load_pair_matrix",
    "MetricsReport",
    "f1_sample",
    "f1_overall",
    "f1_mean",
    "joint_f1",
]
