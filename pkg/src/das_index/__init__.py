"""QoE-optimal scheduling of streaming clients: exact MDP solvers, price
decomposition, Whittle indices, Q-learning and a slot-level simulator."""

from .core import Action, ChannelModel, ClientModel, ModelError, client_mdp, gilbert_elliott, step_cost, \
    transition_distribution
from .dual import dual_value, evaluate_policy, price_iteration, subgradient
from .mdp import PolicyTable, average_cost_solve, backward_induction, discounted_value_iteration, \
    enumerate_policies_oracle, product_mdp_solve, verify_D_monotone, verify_threshold

__version__ = "0.1.0"

__all__ = [
    "Action", "ChannelModel", "ClientModel", "ModelError", "PolicyTable", "average_cost_solve",
    "backward_induction", "client_mdp", "discounted_value_iteration", "dual_value", "enumerate_policies_oracle",
    "evaluate_policy", "gilbert_elliott", "price_iteration", "product_mdp_solve", "step_cost", "subgradient",
    "transition_distribution", "verify_D_monotone", "verify_threshold",
]
