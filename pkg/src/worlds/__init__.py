"""Analytic Gaussian data worlds and the score oracles evaluated on them."""

from src.worlds.gaussian import (
    AnalyticWorld,
    bayes_uncond_score,
    cond_score,
    forward_marginal,
    sample_conditional,
    sample_data,
    uncond_score,
)
from src.worlds.oracles import ExactOracle, PerturbedOracle, ScoreOracle, eps_pair

__all__ = [
    "AnalyticWorld",
    "ExactOracle",
    "PerturbedOracle",
    "ScoreOracle",
    "bayes_uncond_score",
    "cond_score",
    "eps_pair",
    "forward_marginal",
    "sample_conditional",
    "sample_data",
    "uncond_score",
]
