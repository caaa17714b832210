from tests.utils.factories import ConfigFactory, TextureFactory
from tests.utils.helpers import (
    EpisodicMDP,
    brute_force_neighbors,
    central_difference,
    exhaustive_cubic_metric,
    haar_quadrature,
    max_relative_error,
    optimal_action_sets,
    random_episodic_mdp,
)

__all__ = [
    "ConfigFactory",
    "TextureFactory",
    "EpisodicMDP",
    "brute_force_neighbors",
    "central_difference",
    "exhaustive_cubic_metric",
    "haar_quadrature",
    "max_relative_error",
    "optimal_action_sets",
    "random_episodic_mdp",
]
