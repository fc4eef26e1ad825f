"""Optimal jamming of remote state estimation by an energy-harvesting attacker.

Builds the attacker's average-reward MDP from process, channel, energy and
battery models, solves it exactly by relative value iteration, learns it
model-free with RVI Q-learning (optionally with structural constraints),
and evaluates policies by simulation.
"""

__version__ = "0.1.0"

from .channels import BatteryModel, LinkModel, MarkovChain, QamModulation, TableModulation
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    HarvestJamError,
    ModelValidationError,
)
from .kalman import LtiSystem, SteadyState, steady_state
from .mdp import MdpModel, MdpState, ProblemConfig, check_assumption1
from .rvi import PolicyTable, RviResult, ValueTable, rvi_solve, verify_structure

__all__ = [
    "BatteryModel",
    "ConfigError",
    "ConvergenceError",
    "DivergenceError",
    "HarvestJamError",
    "LinkModel",
    "LtiSystem",
    "MarkovChain",
    "MdpModel",
    "MdpState",
    "ModelValidationError",
    "PolicyTable",
    "ProblemConfig",
    "QamModulation",
    "RviResult",
    "SteadyState",
    "TableModulation",
    "ValueTable",
    "check_assumption1",
    "rvi_solve",
    "steady_state",
    "verify_structure",
]
