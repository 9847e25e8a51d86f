"""Reputation-constrained block propagation routing.

Age-of-Block queueing analytics, a subjective-logic miner reputation engine,
an attention encoder-decoder routing policy trained with REINFORCE, and the
Greedy / Gossip routing baselines it is compared against.
"""
from .aob import AobParams, aob_closed_form, aob_mm1_age, fork_probability, simulate_aob, system_time_pdf
from .baselines import BaselineConfig, gossip_trajectory, greedy_trajectory
from .config import ChannelParams
from .network import MinerInstance, Trajectory, distance, evaluate_trajectory, generate_instance, propagation_time
from .reputation import OpinionTuple, ReputationParams, reputation_matrix, simulate_interaction_logs

__version__ = "0.1.0"

__all__ = [
    "AobParams", "aob_closed_form", "aob_mm1_age", "fork_probability", "simulate_aob", "system_time_pdf",
    "BaselineConfig", "gossip_trajectory", "greedy_trajectory", "ChannelParams", "MinerInstance",
    "Trajectory", "distance", "evaluate_trajectory", "generate_instance", "propagation_time",
    "OpinionTuple", "ReputationParams", "reputation_matrix", "simulate_interaction_logs",
]
