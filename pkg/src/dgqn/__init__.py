"""Deep graph Q-network for network-wide traffic signal control, with a queue simulator and baselines."""

from dgqn.baselines import DQNFC, DQNOGCN, FixedPlanController, fixed_action, make_model, spectral_normalize
from dgqn.evaluation import EvalReport, evaluate
from dgqn.model import DGQN, ModelConfig, Transition, build_state, greedy_joint_action, loss_batch, q_values
from dgqn.network import RoadNetwork, builtin_grid2x2, builtin_seoul15, grid_network, load_network
from dgqn.trainer import Hyper, RunConfig, desk_hyper, epsilon, train

__version__ = "0.1.0"

__all__ = [
    "DGQN", "DQNFC", "DQNOGCN", "EvalReport", "FixedPlanController", "Hyper", "ModelConfig", "RoadNetwork",
    "RunConfig", "Transition", "build_state", "builtin_grid2x2", "builtin_seoul15", "desk_hyper", "epsilon",
    "evaluate", "fixed_action", "greedy_joint_action", "grid_network", "load_network", "loss_batch",
    "make_model", "q_values", "spectral_normalize", "train",
]
