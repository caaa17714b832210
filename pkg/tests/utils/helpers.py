from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.services.gsh_features import euler_to_quaternion
from app.services.orientation_space import (
    OrientationGrid,
    cubic_symmetry,
    multiply,
)


def exhaustive_cubic_metric(q1: np.ndarray, q2: np.ndarray) -> float:
    """min over g, h of the chordal distance between q1 * g and q2 * h."""
    symmetry = cubic_symmetry()
    left = multiply(np.asarray(q1)[None, :], symmetry)
    right = multiply(np.asarray(q2)[None, :], symmetry)
    minus = np.linalg.norm(left[:, None, :] - right[None, :, :], axis=-1)
    plus = np.linalg.norm(left[:, None, :] + right[None, :, :], axis=-1)
    return float(np.minimum(minus, plus).min())


def brute_force_neighbors(
    grid: OrientationGrid, q: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """k nearest bins by scanning every bin, sorted by (distance, id)."""
    distances = np.array([exhaustive_cubic_metric(q, o) for o in grid.orientations])
    order = np.lexsort((np.arange(grid.size), distances))[:k]
    return order, distances[order]


def central_difference(
    f: Callable[[], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Numerical gradient of f() with respect to the array x, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = x[index]
        x[index] = original + h
        upper = f()
        x[index] = original - h
        lower = f()
        x[index] = original
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def haar_quadrature(n_angle: int = 32, n_beta: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Product rule over ZYZ Euler angles, exact for harmonics of low degree.

    Uniform nodes in alpha and gamma, Gauss-Legendre nodes in cos(beta);
    weights sum to 1 under the normalized Haar measure.
    """
    angles = 2.0 * np.pi * np.arange(n_angle) / n_angle
    nodes, gl_weights = np.polynomial.legendre.leggauss(n_beta)
    alpha, x, gamma = np.meshgrid(angles, nodes, angles, indexing="ij")
    _, w, _ = np.meshgrid(angles, gl_weights, angles, indexing="ij")
    q = euler_to_quaternion(alpha.ravel(), np.arccos(x.ravel()), gamma.ravel())
    weights = w.ravel() / (2.0 * n_angle * n_angle)
    return q, weights


@dataclass
class EpisodicMDP:
    """Layered acyclic MDP; the last layer is terminal."""

    transitions: np.ndarray
    distances: np.ndarray
    terminal: np.ndarray
    layers: list[np.ndarray]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def random_episodic_mdp(
    rng: np.random.Generator,
    n_states: int = 20,
    n_actions: int = 4,
    n_layers: int = 4,
) -> EpisodicMDP:
    """Random stochastic transitions between consecutive layers.

    The last action duplicates the first so that every state has a tie.
    """
    layers = np.array_split(np.arange(n_states), n_layers)
    transitions = np.zeros((n_states, n_actions, n_states))
    for current, following in zip(layers[:-1], layers[1:]):
        for s in current:
            for a in range(n_actions - 1):
                transitions[s, a, following] = rng.dirichlet(np.ones(len(following)))
            transitions[s, n_actions - 1] = transitions[s, 0]
    terminal = np.zeros(n_states, dtype=bool)
    terminal[layers[-1]] = True
    return EpisodicMDP(
        transitions=transitions,
        distances=rng.uniform(0.05, 3.0, size=n_states),
        terminal=terminal,
        layers=layers,
    )


def optimal_action_sets(
    mdp: EpisodicMDP,
    reward: Callable[[int, int], float],
    gamma: float,
    tol: float = 1e-9,
) -> dict[int, frozenset[int]]:
    """Backward-induction Q values; every action within tol of the max per state."""
    n_states = len(mdp.terminal)
    values = np.zeros(n_states)
    best: dict[int, frozenset[int]] = {}
    for layer in reversed(mdp.layers[:-1]):
        for s in layer:
            q = np.zeros(mdp.n_actions)
            for a in range(mdp.n_actions):
                successors = np.nonzero(mdp.transitions[s, a])[0]
                q[a] = sum(
                    mdp.transitions[s, a, s2] * (reward(s, s2) + gamma * values[s2])
                    for s2 in successors
                )
            values[s] = q.max()
            best[int(s)] = frozenset(int(a) for a in np.nonzero(q >= q.max() - tol)[0])
    return best
