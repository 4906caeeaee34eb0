"""Attacks against the trained classifiers."""
from .evolution import (EvoConfig, GenomeTrie, campaign, evolutionary_attack, model_fitness, model_predict,
                        move_exploit_attack, move_scatter_attack, pick_donors, scatter_attack)
from .gradient import bounded_attack_batch, bounded_gradient_attack, unbounded_gradient_attack
from .mimicry import Payload, extract_payload, reverse_mimicry
from .realize import realize_vector
from .report import attack_report, era_curve, median_cost
from .result import AttackResult

__all__ = [
    "AttackResult", "EvoConfig", "GenomeTrie", "Payload", "attack_report", "bounded_attack_batch",
    "bounded_gradient_attack", "campaign", "era_curve", "evolutionary_attack", "extract_payload",
    "median_cost", "model_fitness", "model_predict", "move_exploit_attack", "move_scatter_attack",
    "pick_donors", "realize_vector", "reverse_mimicry", "scatter_attack", "unbounded_gradient_attack",
]
