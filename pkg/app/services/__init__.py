from app.services.odf_histogram import HistogramDistance, WeightedOrientationSet
from app.services.orientation_space import OrientationGrid, sample_uniform_grid
from app.services.process_env import TextureProcessEnv
from app.services.q_network import QNetwork
from app.services.replay_memory import PrioritizedReplayBuffer
from app.services.rl_agents import DQNTrainer, run_multi_goal, run_single_goal
from app.services.taylor_model import TaylorModel

__all__ = [
    "HistogramDistance",
    "WeightedOrientationSet",
    "OrientationGrid",
    "sample_uniform_grid",
    "TextureProcessEnv",
    "QNetwork",
    "PrioritizedReplayBuffer",
    "DQNTrainer",
    "run_multi_goal",
    "run_single_goal",
    "TaylorModel",
]
