"""Goal-conditioned Q-network in numpy with hand-written reverse-mode gradients.

Hidden blocks are ``linear -> layer norm -> ReLU``. The head is either a
dueling pair ``Q = V + A - mean_a A`` or a plain linear Q head.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from app import metrics
from app.core.enums import LossKind
from app.exceptions import (
    ArtifactNotFoundException,
    InvalidArgumentException,
    TrainingFailureException,
)
from app.schemas.config import NetworkConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def layer_norm(z: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise standardization; returns (x_hat, inverse std)."""
    mean = z.mean(axis=1, keepdims=True)
    centered = z - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    return centered * inv_std, inv_std


def layer_norm_backward(
    d_out: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray
) -> np.ndarray:
    """Gradient through x_hat = (z - mean) / std for upstream d_out = dL/dx_hat."""
    mean_d = d_out.mean(axis=1, keepdims=True)
    mean_dx = (d_out * x_hat).mean(axis=1, keepdims=True)
    return inv_std * (d_out - mean_d - x_hat * mean_dx)


def huber(delta: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-item Huber loss and its derivative with respect to delta."""
    abs_delta = np.abs(delta)
    quadratic = abs_delta <= threshold
    loss = np.where(
        quadratic, 0.5 * delta * delta, threshold * (abs_delta - 0.5 * threshold)
    )
    grad = np.clip(delta, -threshold, threshold)
    return loss, grad


def dueling_aggregate(value: np.ndarray, advantage: np.ndarray) -> np.ndarray:
    return value + advantage - advantage.mean(axis=1, keepdims=True)


def dueling_backward(d_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dV, dL/dA) from dL/dQ."""
    d_value = d_q.sum(axis=1, keepdims=True)
    d_advantage = d_q - d_q.mean(axis=1, keepdims=True)
    return d_value, d_advantage


@dataclass
class AdamState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
        )


@dataclass
class ForwardCache:
    inputs: np.ndarray
    hidden: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list
    )
    features: Optional[np.ndarray] = None


class QNetwork:
    """Parameters, optimizer state and the forward/backward passes."""

    def __init__(
        self,
        state_dim: int,
        goal_dim: int,
        n_actions: int,
        config: Optional[NetworkConfig] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if state_dim <= 0 or goal_dim < 0 or n_actions <= 0:
            raise InvalidArgumentException(
                "Invalid network dimensions",
                state_dim=state_dim,
                goal_dim=goal_dim,
                n_actions=n_actions,
            )
        self.config = config or NetworkConfig()
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        self.n_actions = n_actions
        self.params = self._init_params(rng or np.random.default_rng(0))
        self.adam = AdamState.zeros_like(self.params)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.goal_dim

    @property
    def architecture(self) -> dict[str, Any]:
        return {
            "state_dim": self.state_dim,
            "goal_dim": self.goal_dim,
            "n_actions": self.n_actions,
            "hidden_sizes": list(self.config.hidden_sizes),
            "dueling": self.config.dueling,
        }

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}

        def he_uniform(fan_in: int, fan_out: int) -> np.ndarray:
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        fan_in = self.input_dim
        for i, width in enumerate(self.config.hidden_sizes):
            params[f"W{i}"] = he_uniform(fan_in, width)
            params[f"b{i}"] = np.zeros(width)
            params[f"gain{i}"] = np.ones(width)
            params[f"offset{i}"] = np.zeros(width)
            fan_in = width

        if self.config.dueling:
            params["W_value"] = he_uniform(fan_in, 1)
            params["b_value"] = np.zeros(1)
            params["W_adv"] = he_uniform(fan_in, self.n_actions)
            params["b_adv"] = np.zeros(self.n_actions)
        else:
            params["W_q"] = he_uniform(fan_in, self.n_actions)
            params["b_q"] = np.zeros(self.n_actions)
        return params

    def _inputs(
        self, states: np.ndarray, goals: Optional[np.ndarray]
    ) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if goals is None or self.goal_dim == 0:
            if goals is not None and np.size(goals) > 0:
                raise InvalidArgumentException(
                    "Goal features given to an unconditioned network",
                    goal_len=int(np.shape(goals)[-1]),
                )
            x = states
        else:
            goals = np.atleast_2d(np.asarray(goals, dtype=float))
            if len(goals) == 1 and len(states) > 1:
                goals = np.repeat(goals, len(states), axis=0)
            x = np.concatenate([states, goals], axis=1)
        if x.shape[1] != self.input_dim:
            raise InvalidArgumentException(
                "Input features do not match the network",
                got=int(x.shape[1]),
                expected=self.input_dim,
            )
        return x

    def _forward(
        self, x: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
        p = self.params
        cache = ForwardCache(inputs=x)
        h = x
        for i in range(len(self.config.hidden_sizes)):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            x_hat, inv_std = layer_norm(z, self.config.layer_norm_eps)
            pre = p[f"gain{i}"] * x_hat + p[f"offset{i}"]
            cache.hidden.append((h, x_hat, inv_std, pre))
            h = relu(pre)
        cache.features = h

        if self.config.dueling:
            value = h @ p["W_value"] + p["b_value"]
            advantage = h @ p["W_adv"] + p["b_adv"]
            q = dueling_aggregate(value, advantage)
        else:
            q = h @ p["W_q"] + p["b_q"]
            value = q.max(axis=1, keepdims=True)
        return q, value[:, 0], cache

    def forward(
        self, states: np.ndarray, goals: Optional[np.ndarray] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Q values (n, n_actions) and state values V (n,).

        Without a dueling head, V is max_a Q.
        """
        q, value, _ = self._forward(self._inputs(states, goals))
        return q, value

    def q_values(self, states: np.ndarray, goals: Optional[np.ndarray] = None) -> np.ndarray:
        return self.forward(states, goals)[0]

    def backward(self, cache: ForwardCache, d_q: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        h = cache.features
        assert h is not None

        if self.config.dueling:
            d_value, d_adv = dueling_backward(d_q)
            grads["W_value"] = h.T @ d_value
            grads["b_value"] = d_value.sum(axis=0)
            grads["W_adv"] = h.T @ d_adv
            grads["b_adv"] = d_adv.sum(axis=0)
            d_h = d_value @ p["W_value"].T + d_adv @ p["W_adv"].T
        else:
            grads["W_q"] = h.T @ d_q
            grads["b_q"] = d_q.sum(axis=0)
            d_h = d_q @ p["W_q"].T

        for i in reversed(range(len(self.config.hidden_sizes))):
            h_in, x_hat, inv_std, pre = cache.hidden[i]
            d_pre = d_h * (pre > 0)
            grads[f"gain{i}"] = (d_pre * x_hat).sum(axis=0)
            grads[f"offset{i}"] = d_pre.sum(axis=0)
            d_z = layer_norm_backward(d_pre * p[f"gain{i}"], x_hat, inv_std)
            grads[f"W{i}"] = h_in.T @ d_z
            grads[f"b{i}"] = d_z.sum(axis=0)
            d_h = d_z @ p[f"W{i}"].T
        return grads

    def loss_and_gradients(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        targets: np.ndarray,
        weights: Optional[np.ndarray] = None,
        goals: Optional[np.ndarray] = None,
    ) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
        """IS-weighted mean loss, TD errors Y - Q(s, a) and parameter gradients."""
        x = self._inputs(states, goals)
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=float)
        n = len(x)
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        if actions.shape != (n,) or targets.shape != (n,) or weights.shape != (n,):
            raise InvalidArgumentException(
                "Batch arrays must share the batch length", batch=n
            )
        if np.any((actions < 0) | (actions >= self.n_actions)):
            raise InvalidArgumentException("Action id out of range", n_actions=self.n_actions)

        q, _, cache = self._forward(x)
        rows = np.arange(n)
        td = targets - q[rows, actions]
        if self.config.loss == LossKind.HUBER:
            per_item, d_td = huber(td, self.config.huber_delta)
        else:
            per_item, d_td = 0.5 * td * td, td
        loss = float(np.mean(weights * per_item))

        d_q = np.zeros_like(q)
        d_q[rows, actions] = -weights * d_td / n
        return loss, td, self.backward(cache, d_q)

    def apply_gradients(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        adam = self.adam
        adam.step += 1
        correction1 = 1.0 - cfg.adam_beta1**adam.step
        correction2 = 1.0 - cfg.adam_beta2**adam.step
        for name, grad in grads.items():
            m = adam.first[name]
            v = adam.second[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * grad
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * grad * grad
            self.params[name] -= (
                cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
            )

    def train_batch(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        targets: np.ndarray,
        weights: Optional[np.ndarray] = None,
        goals: Optional[np.ndarray] = None,
        snapshot_dir: Optional[Path] = None,
    ) -> tuple[float, np.ndarray]:
        """One ADAM step on the weighted TD loss; returns (loss, |TD error|)."""
        loss, td, grads = self.loss_and_gradients(states, actions, targets, weights, goals)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            self._fail(snapshot_dir)
        self.apply_gradients(grads)
        if not all(np.all(np.isfinite(v)) for v in self.params.values()):
            self._fail(snapshot_dir)
        metrics.train_batches_total.inc()
        return loss, np.abs(td)

    def _fail(self, snapshot_dir: Optional[Path]) -> None:
        snapshot_path = None
        if snapshot_dir is not None:
            path = Path(snapshot_dir) / f"failure-step{self.adam.step}.npz"
            self.save(path)
            snapshot_path = str(path)
        logger.error(
            "Non-finite training update step=%s snapshot=%s",
            self.adam.step,
            snapshot_path,
            extra={"step": self.adam.step, "snapshot_path": snapshot_path},
        )
        raise TrainingFailureException(self.adam.step, snapshot_path)

    def copy(self) -> "QNetwork":
        clone = QNetwork.__new__(QNetwork)
        clone.config = self.config
        clone.state_dim = self.state_dim
        clone.goal_dim = self.goal_dim
        clone.n_actions = self.n_actions
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.adam = AdamState(
            {k: v.copy() for k, v in self.adam.first.items()},
            {k: v.copy() for k, v in self.adam.second.items()},
            self.adam.step,
        )
        return clone

    def save(self, path: Path, rng_state: Optional[dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "version": CHECKPOINT_VERSION,
            "architecture": self.architecture,
            "config": self.config.model_dump(mode="json"),
            "adam_step": self.adam.step,
            "rng_state": rng_state,
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.first.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.second.items()})
        with path.open("wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)
        return path

    @classmethod
    def load(cls, path: Path) -> tuple["QNetwork", Optional[dict[str, Any]]]:
        """Restore a checkpoint; returns the network and the stored RNG state."""
        path = Path(path)
        if not path.exists():
            raise ArtifactNotFoundException(str(path))
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise InvalidArgumentException(
                    "Unsupported checkpoint version", version=header.get("version")
                )
            arch = header["architecture"]
            network = cls(
                arch["state_dim"],
                arch["goal_dim"],
                arch["n_actions"],
                NetworkConfig.model_validate(header["config"]),
            )
            for prefix, target in (
                ("param/", network.params),
                ("adam_m/", network.adam.first),
                ("adam_v/", network.adam.second),
            ):
                for name in target:
                    target[name] = data[prefix + name].copy()
            network.adam.step = int(header["adam_step"])
        return network, header.get("rng_state")


def sync_target(online: QNetwork, target: QNetwork) -> None:
    """Copy online parameters into the target network (theta_minus <- theta)."""
    if online.architecture != target.architecture:
        raise InvalidArgumentException(
            "Target architecture differs from the online network",
            online=online.architecture,
            target=target.architecture,
        )
    for name, value in online.params.items():
        target.params[name] = value.copy()
