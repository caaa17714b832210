"""Single-goal and multi-goal DQN training loops over the texture process env."""

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from app import metrics
from app.core.enums import GoalValueKind, RunMode, SelectionType, TerminalReason
from app.exceptions import InvalidArgumentException
from app.schemas.config import AgentConfig, NetworkConfig, ReplayConfig
from app.schemas.records import EpisodeRecord, GoalStatistics, RunSummary, StepRecord
from app.services.odf_histogram import WeightedOrientationSet
from app.services.process_env import EnvState, GoalSpec, ProcessAction, TextureProcessEnv
from app.services.q_network import QNetwork, sync_target
from app.services.replay_memory import (
    Experience,
    PrioritizedReplayBuffer,
    SampledBatch,
    beta_schedule,
)

logger = logging.getLogger(__name__)

REWARD_AUDIT_TOL = 1e-9


def epsilon(episode: int, eps0: float, eps_final: float, n_episodes: int) -> float:
    """Linear decay from eps0 to eps_final over n_episodes, then constant."""
    if n_episodes < 1:
        raise InvalidArgumentException("n_episodes must be >= 1", n_episodes=n_episodes)
    fraction = min(1.0, episode / n_episodes)
    return eps0 + (eps_final - eps0) * fraction


def ddqn_target(
    batch: SampledBatch,
    online: QNetwork,
    target: QNetwork,
    gamma: float,
    double: bool = True,
) -> np.ndarray:
    """Y = R + gamma * Q_target(s', a*) with a* from the online net; Y = R on terminals."""
    q_next_target = target.q_values(batch.next_states, batch.goals)
    if double:
        greedy = np.argmax(online.q_values(batch.next_states, batch.goals), axis=1)
    else:
        greedy = np.argmax(q_next_target, axis=1)
    bootstrap = q_next_target[np.arange(len(greedy)), greedy]
    return batch.rewards + gamma * np.where(batch.dones, 0.0, bootstrap)


@dataclass
class GoalSet:
    goals: list[GoalSpec]
    stats: list[GoalStatistics] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.goals:
            raise InvalidArgumentException("Goal set must not be empty")
        if not self.stats:
            self.stats = [GoalStatistics(goal_id=i) for i in range(len(self.goals))]

    def __len__(self) -> int:
        return len(self.goals)

    @property
    def features(self) -> np.ndarray:
        return np.stack([g.features for g in self.goals])

    def check_distinct(self, env: TextureProcessEnv) -> None:
        for i in range(len(self.goals)):
            for j in range(i + 1, len(self.goals)):
                if env.goal_distance(self.goals[i].histogram, self.goals[j]) <= 0.0:
                    raise InvalidArgumentException(
                        "Goal set contains duplicate goals", first=i, second=j
                    )

    def record_state(self, env: TextureProcessEnv, state: EnvState) -> None:
        for goal_id, goal in enumerate(self.goals):
            d = env.goal_distance(state.histogram, goal)
            if d < self.stats[goal_id].best_distance:
                self.stats[goal_id].best_distance = d


@dataclass
class EpisodeLog:
    episode: int
    goal_id: int = 0
    selection_type: SelectionType = SelectionType.GREEDY
    steps: list[StepRecord] = field(default_factory=list)
    actions: list[ProcessAction] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    terminal_reason: TerminalReason = TerminalReason.NONE

    @property
    def best_t(self) -> int:
        """Earliest index of the minimal distance over states 0..N."""
        return int(np.argmin(self.distances))

    @property
    def best_distance(self) -> float:
        return float(self.distances[self.best_t])


def prune_best_subpath(log: EpisodeLog) -> list[ProcessAction]:
    """Action prefix that leads from the initial texture to the episode's best state."""
    return list(log.actions[: log.best_t])


def select_goal(
    goal_set: GoalSet,
    s0: EnvState,
    network: QNetwork,
    goal_epsilon: float,
    rng: np.random.Generator,
    env: TextureProcessEnv,
    value_kind: GoalValueKind = GoalValueKind.DUELING_VALUE,
) -> tuple[int, SelectionType]:
    """Greedy argmax_g [V(s0, g) + 1/d(s0, g)], or a uniform goal with probability goal_epsilon."""
    if rng.random() < goal_epsilon:
        return int(rng.integers(len(goal_set))), SelectionType.EXPLORE

    features = goal_set.features
    states = np.repeat(s0.features[None, :], len(goal_set), axis=0)
    q, value = network.forward(states, features)
    if value_kind == GoalValueKind.MAX_Q:
        value = q.max(axis=1)
    bonus = np.array(
        [env.potential(env.goal_distance(s0.histogram, goal)) for goal in goal_set.goals]
    )
    return int(np.argmax(value + bonus)), SelectionType.GREEDY


@dataclass
class Transition:
    state: EnvState
    action_id: int
    next_state: EnvState
    done: bool


@dataclass
class RunResult:
    mode: RunMode
    seed: int
    episodes: list[EpisodeRecord]
    steps: list[StepRecord]
    best_distance: float
    best_episode: int
    best_path: list[ProcessAction]
    goal_set: GoalSet
    network: QNetwork
    replay: PrioritizedReplayBuffer
    wall_time_s: float = 0.0

    @property
    def committed_goal(self) -> Optional[int]:
        """Most frequent greedy goal pick in the final 20% of episodes."""
        if self.mode != RunMode.MULTI:
            return None
        tail = self.episodes[int(0.8 * len(self.episodes)) :]
        picks = Counter(
            e.goal_id for e in tail if e.selection_type == SelectionType.GREEDY
        )
        if not picks:
            return None
        return min(picks, key=lambda g: (-picks[g], g))

    def summary(self) -> RunSummary:
        return RunSummary(
            mode=self.mode.value,
            seed=self.seed,
            episodes=len(self.episodes),
            best_distance=self.best_distance,
            best_episode=self.best_episode,
            best_path_length=len(self.best_path),
            committed_goal=self.committed_goal,
            wall_time_s=self.wall_time_s,
            replay_inserts=self.replay.next_sequence,
            stale_priority_updates=self.replay.stale_updates,
        )


CheckpointHook = Callable[[int, QNetwork, np.random.Generator], None]


class DQNTrainer:
    """Owns the online/target networks, replay and RNG streams of one run."""

    def __init__(
        self,
        env: TextureProcessEnv,
        goal_set: GoalSet,
        mode: RunMode,
        agent: Optional[AgentConfig] = None,
        replay: Optional[ReplayConfig] = None,
        network: Optional[NetworkConfig] = None,
        seed: int = 0,
        snapshot_dir: Optional[Path] = None,
        on_checkpoint: Optional[CheckpointHook] = None,
    ) -> None:
        self.env = env
        self.goal_set = goal_set
        self.mode = mode
        self.agent = agent or AgentConfig()
        if self.agent.gamma != env.config.gamma:
            raise InvalidArgumentException(
                "Agent and environment discount factors differ",
                agent_gamma=self.agent.gamma,
                env_gamma=env.config.gamma,
            )
        self.seed = seed
        self.snapshot_dir = snapshot_dir
        self.on_checkpoint = on_checkpoint

        explore_seq, goal_seq, replay_seq, init_seq = np.random.SeedSequence(seed).spawn(4)
        self.explore_rng = np.random.default_rng(explore_seq)
        self.goal_rng = np.random.default_rng(goal_seq)
        self.replay_rng = np.random.default_rng(replay_seq)

        goal_dim = len(goal_set.goals[0].features) if mode == RunMode.MULTI else 0
        self.online = QNetwork(
            env.state_dim,
            goal_dim,
            env.action_space.n,
            network,
            np.random.default_rng(init_seq),
        )
        self.target = self.online.copy()
        self.replay = PrioritizedReplayBuffer(replay)
        self.total_steps = 0
        self.total_env_steps = self.agent.episodes * env.config.horizon

    def goal_features(self, goal_id: int) -> np.ndarray:
        if self.mode == RunMode.MULTI:
            return self.goal_set.goals[goal_id].features
        return np.zeros(0)

    def act(self, state: EnvState, goal_id: int, eps: float) -> tuple[int, bool]:
        if self.explore_rng.random() < eps:
            return int(self.explore_rng.integers(self.env.action_space.n)), True
        goal = self.goal_features(goal_id)
        q = self.online.q_values(state.features, goal if goal.size else None)
        return int(np.argmax(q[0])), False

    def relabeled_reward(self, transition: Transition, goal_id: int) -> float:
        goal = self.goal_set.goals[goal_id]
        return self.env.shaped_reward(
            self.env.goal_distance(transition.state.histogram, goal),
            self.env.goal_distance(transition.next_state.histogram, goal),
            transition.done,
        )

    def store(self, transition: Transition, goal_id: int, origin: str) -> None:
        self.replay.insert(
            Experience(
                state=transition.state.features,
                action=transition.action_id,
                next_state=transition.next_state.features,
                reward=self.relabeled_reward(transition, goal_id),
                goal=self.goal_features(goal_id),
                done=transition.done,
                audit=(transition.state.histogram, transition.next_state.histogram, goal_id),
            ),
            origin=origin,
        )

    def train_step(self) -> Optional[float]:
        if self.total_steps < self.agent.warmup_steps:
            return None
        if len(self.replay) < self.agent.batch_size:
            return None
        losses = []
        beta = beta_schedule(
            self.total_steps, self.total_env_steps, self.replay.config.beta0
        )
        for _ in range(self.agent.batches_per_step):
            batch = self.replay.sample(self.agent.batch_size, beta, self.replay_rng)
            targets = ddqn_target(
                batch, self.online, self.target, self.agent.gamma, self.agent.double_q
            )
            loss, abs_td = self.online.train_batch(
                batch.states,
                batch.actions,
                targets,
                batch.weights,
                batch.goals,
                snapshot_dir=self.snapshot_dir,
            )
            self.replay.update_priorities(batch.indices, abs_td)
            losses.append(loss)
        return float(np.mean(losses))

    def run_episode(
        self,
        episode: int,
        goal_id: int,
        selection: SelectionType,
        eps: float,
        insert_now: bool,
    ) -> tuple[EpisodeLog, list[Transition], list[float]]:
        env = self.env
        env.set_target(self.goal_set.goals[goal_id])
        state = env.reset(seed=self.seed)
        log = EpisodeLog(episode, goal_id, selection, distances=[state.distance])
        self.goal_set.record_state(env, state)
        transitions: list[Transition] = []
        losses: list[float] = []

        done = False
        while not done:
            action_id, explored = self.act(state, goal_id, eps)
            next_state, reward, done, info = env.step(action_id)
            transition = Transition(state, action_id, next_state, done)
            transitions.append(transition)
            if insert_now:
                self.store(transition, goal_id, origin="pursued")

            applied = env.action_space.decode(action_id)
            if info["magnitude"] == 0.0:
                applied = ProcessAction(0.0)
            log.actions.append(applied)
            log.distances.append(next_state.distance)
            log.steps.append(
                StepRecord(
                    episode=episode,
                    t=next_state.t,
                    goal_id=goal_id,
                    action_id=action_id,
                    magnitude=info["magnitude"],
                    qw=float(applied.rotation[0]),
                    qx=float(applied.rotation[1]),
                    qy=float(applied.rotation[2]),
                    qz=float(applied.rotation[3]),
                    reward=reward,
                    raw_reward=info["raw_reward"],
                    distance=next_state.distance,
                    eq_strain=next_state.eq_strain,
                    epsilon=eps,
                    explored=explored,
                    substeps=info["substeps"],
                    done=done,
                    terminal_reason=TerminalReason(info["terminal_reason"]),
                )
            )
            self.goal_set.record_state(env, next_state)

            self.total_steps += 1
            loss = self.train_step()
            if loss is not None:
                losses.append(loss)
            if self.total_steps % self.agent.target_sync_steps == 0:
                sync_target(self.online, self.target)
            state = next_state

        log.terminal_reason = env.terminal_reason
        return log, transitions, losses

    def augment(self, transitions: Sequence[Transition], pursued: int) -> None:
        """Relabel the episode's transitions for every goal and insert them."""
        goal_ids = range(len(self.goal_set)) if self.agent.augmentation else [pursued]
        for goal_id in goal_ids:
            origin = "pursued" if goal_id == pursued else "augmented"
            for transition in transitions:
                self.store(transition, goal_id, origin)

    def train(self) -> RunResult:
        started = time.perf_counter()
        cfg = self.agent
        episodes: list[EpisodeRecord] = []
        steps: list[StepRecord] = []
        best_distance = float("inf")
        best_episode = -1
        best_path: list[ProcessAction] = []

        logger.info(
            "Training started mode=%s seed=%s episodes=%s goals=%s",
            self.mode.value,
            self.seed,
            cfg.episodes,
            len(self.goal_set),
            extra={"mode": self.mode.value, "seed": self.seed, "episodes": cfg.episodes},
        )
        for episode in range(cfg.episodes):
            eps = epsilon(episode, cfg.eps0, cfg.eps_final, cfg.eps_episodes)
            goal_eps: Optional[float] = None
            if self.mode == RunMode.MULTI:
                goal_eps = epsilon(
                    episode, cfg.goal_eps0, cfg.goal_eps_final, cfg.goal_eps_episodes
                )
                s0 = self.env.reset(seed=self.seed)
                goal_id, selection = select_goal(
                    self.goal_set,
                    s0,
                    self.online,
                    goal_eps,
                    self.goal_rng,
                    self.env,
                    cfg.goal_value,
                )
                stats = self.goal_set.stats[goal_id]
                if selection == SelectionType.GREEDY:
                    stats.selections_greedy += 1
                else:
                    stats.selections_explore += 1
            else:
                goal_id, selection = 0, SelectionType.GREEDY

            log, transitions, losses = self.run_episode(
                episode, goal_id, selection, eps, insert_now=self.mode != RunMode.MULTI
            )
            if self.mode == RunMode.MULTI:
                self.augment(transitions, goal_id)

            if log.best_distance < best_distance:
                best_distance = log.best_distance
                best_episode = episode
                best_path = prune_best_subpath(log)
            metrics.best_distance.set(best_distance)
            metrics.episodes_total.labels(
                mode=self.mode.value, terminal_reason=log.terminal_reason.value
            ).inc()

            record = EpisodeRecord(
                episode=episode,
                goal_id=goal_id,
                selection_type=selection,
                initial_distance=log.distances[0],
                best_distance=log.best_distance,
                best_t=log.best_t,
                running_best_distance=best_distance,
                steps=len(log.steps),
                terminal_reason=log.terminal_reason,
                epsilon=eps,
                goal_epsilon=goal_eps,
                mean_loss=float(np.mean(losses)) if losses else None,
            )
            episodes.append(record)
            steps.extend(log.steps)
            logger.info(
                "Episode finished episode=%s goal_id=%s selection=%s best_distance=%.6g "
                "running_best=%.6g terminal_reason=%s",
                episode,
                goal_id,
                selection.value,
                log.best_distance,
                best_distance,
                log.terminal_reason.value,
                extra={
                    "episode": episode,
                    "goal_id": goal_id,
                    "distance": log.best_distance,
                    "terminal_reason": log.terminal_reason.value,
                },
            )
            if self.on_checkpoint and (episode + 1) % cfg.checkpoint_every == 0:
                self.on_checkpoint(episode, self.online, self.explore_rng)

        result = RunResult(
            mode=self.mode,
            seed=self.seed,
            episodes=episodes,
            steps=steps,
            best_distance=best_distance,
            best_episode=best_episode,
            best_path=best_path,
            goal_set=self.goal_set,
            network=self.online,
            replay=self.replay,
            wall_time_s=time.perf_counter() - started,
        )
        logger.info(
            "Training finished mode=%s best_distance=%.6g best_episode=%s",
            self.mode.value,
            best_distance,
            best_episode,
            extra={"mode": self.mode.value, "distance": best_distance},
        )
        return result


def run_single_goal(
    env: TextureProcessEnv,
    target: WeightedOrientationSet | GoalSpec,
    agent: Optional[AgentConfig] = None,
    replay: Optional[ReplayConfig] = None,
    network: Optional[NetworkConfig] = None,
    seed: int = 0,
    snapshot_dir: Optional[Path] = None,
    on_checkpoint: Optional[CheckpointHook] = None,
) -> RunResult:
    goal = env.set_target(target)
    trainer = DQNTrainer(
        env,
        GoalSet([goal]),
        RunMode.SINGLE,
        agent,
        replay,
        network,
        seed,
        snapshot_dir,
        on_checkpoint,
    )
    return trainer.train()


def run_multi_goal(
    env: TextureProcessEnv,
    goals: Sequence[WeightedOrientationSet | GoalSpec],
    agent: Optional[AgentConfig] = None,
    replay: Optional[ReplayConfig] = None,
    network: Optional[NetworkConfig] = None,
    seed: int = 0,
    snapshot_dir: Optional[Path] = None,
    on_checkpoint: Optional[CheckpointHook] = None,
) -> RunResult:
    specs = [g if isinstance(g, GoalSpec) else env.encode_goal(g) for g in goals]
    goal_set = GoalSet(specs)
    goal_set.check_distinct(env)
    trainer = DQNTrainer(
        env,
        goal_set,
        RunMode.MULTI,
        agent,
        replay,
        network,
        seed,
        snapshot_dir,
        on_checkpoint,
    )
    return trainer.train()


def evaluate_greedy(
    env: TextureProcessEnv,
    network: QNetwork,
    goal: GoalSpec,
    goal_conditioned: bool = True,
) -> EpisodeLog:
    """One purely greedy episode towards goal."""
    env.set_target(goal)
    state = env.reset()
    log = EpisodeLog(episode=-1, distances=[state.distance])
    done = False
    while not done:
        q = network.q_values(state.features, goal.features if goal_conditioned else None)
        action_id = int(np.argmax(q[0]))
        state, _, done, info = env.step(action_id)
        applied = env.action_space.decode(action_id)
        log.actions.append(applied if info["magnitude"] != 0.0 else ProcessAction(0.0))
        log.distances.append(state.distance)
    log.terminal_reason = env.terminal_reason
    return log


def replay_path(
    env: TextureProcessEnv, actions: Sequence[ProcessAction]
) -> EnvState:
    """Re-execute a processing path from a fresh episode; returns the final state."""
    state = env.reset()
    for action in actions:
        if state.done:
            break
        state, _, _, _ = env.step_action(action)
    return state


def audit_replay_rewards(
    replay: PrioritizedReplayBuffer, env: TextureProcessEnv, goal_set: GoalSet
) -> list[int]:
    """Sequence numbers of stored experiences whose reward does not recompute."""
    mismatched = []
    start = max(0, replay.next_sequence - replay.capacity)
    for index, exp in enumerate(replay.experiences(), start=start):
        if exp.audit is None:
            continue
        state_hist, next_hist, goal_id = exp.audit
        goal = goal_set.goals[goal_id]
        expected = env.shaped_reward(
            env.goal_distance(state_hist, goal),
            env.goal_distance(next_hist, goal),
            exp.done,
        )
        if abs(expected - exp.reward) > REWARD_AUDIT_TOL:
            mismatched.append(index)
    return mismatched
