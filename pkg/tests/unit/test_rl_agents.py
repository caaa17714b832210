from typing import Optional

import numpy as np
import pytest

from app.core.enums import GoalValueKind, RunMode, SelectionType, TerminalReason
from app.exceptions import InvalidArgumentException
from app.schemas.records import EpisodeRecord
from app.services.process_env import ProcessAction, TextureProcessEnv
from app.services.q_network import QNetwork
from app.services.replay_memory import SampledBatch
from app.services.rl_agents import (
    EpisodeLog,
    GoalSet,
    RunResult,
    ddqn_target,
    epsilon,
    prune_best_subpath,
    run_single_goal,
    select_goal,
)
from tests.utils import ConfigFactory, TextureFactory


class FixedQ:
    """Stands in for a network with a fixed Q table per next state."""

    def __init__(self, table: np.ndarray) -> None:
        self.table = np.atleast_2d(np.asarray(table, dtype=float))

    def q_values(self, states: np.ndarray, goals: Optional[np.ndarray] = None) -> np.ndarray:
        return self.table


def one_item_batch(reward: float, done: bool) -> SampledBatch:
    return SampledBatch(
        states=np.zeros((1, 2)),
        actions=np.array([0]),
        next_states=np.ones((1, 2)),
        rewards=np.array([reward]),
        goals=np.zeros((1, 0)),
        dones=np.array([done]),
        indices=np.array([0]),
        weights=np.ones(1),
    )


def zero_network(env: TextureProcessEnv, goal_dim: int, dueling: bool = True) -> QNetwork:
    network = QNetwork(
        env.state_dim,
        goal_dim,
        env.action_space.n,
        ConfigFactory.network_config(dueling=dueling),
    )
    for param in network.params.values():
        param[...] = 0.0
    return network


def episode_record(episode: int, goal_id: int, selection: SelectionType) -> EpisodeRecord:
    return EpisodeRecord(
        episode=episode,
        goal_id=goal_id,
        selection_type=selection,
        initial_distance=1.0,
        best_distance=0.5,
        best_t=1,
        running_best_distance=0.5,
        steps=3,
        terminal_reason=TerminalReason.HORIZON,
        epsilon=0.1,
    )


def run_result(episodes: list[EpisodeRecord], mode: RunMode = RunMode.MULTI) -> RunResult:
    return RunResult(
        mode=mode,
        seed=0,
        episodes=episodes,
        steps=[],
        best_distance=0.5,
        best_episode=0,
        best_path=[],
        goal_set=None,
        network=None,
        replay=None,
    )


@pytest.mark.unit
class TestEpsilonSchedule:
    def test_linear_decay_then_constant(self) -> None:
        assert epsilon(0, 0.5, 0.1, 50) == pytest.approx(0.5)
        assert epsilon(25, 0.5, 0.1, 50) == pytest.approx(0.3)
        assert epsilon(50, 0.5, 0.1, 50) == pytest.approx(0.1)
        assert epsilon(99, 0.5, 0.1, 50) == pytest.approx(0.1)

    def test_episode_count_must_be_positive(self) -> None:
        with pytest.raises(InvalidArgumentException):
            epsilon(0, 0.5, 0.1, 0)


@pytest.mark.unit
class TestDoubleDQNTarget:
    def test_online_network_selects_target_network_evaluates(self) -> None:
        online = FixedQ([1.0, 5.0, 2.0])
        target = FixedQ([4.0, 2.0, 6.0])

        y = ddqn_target(one_item_batch(1.0, False), online, target, gamma=1.0)

        np.testing.assert_allclose(y, [3.0])

    def test_plain_dqn_uses_target_maximum(self) -> None:
        online = FixedQ([1.0, 5.0, 2.0])
        target = FixedQ([4.0, 2.0, 6.0])

        y = ddqn_target(one_item_batch(1.0, False), online, target, gamma=1.0, double=False)

        np.testing.assert_allclose(y, [7.0])

    def test_terminal_transitions_do_not_bootstrap(self) -> None:
        online = FixedQ([1.0, 5.0, 2.0])
        target = FixedQ([4.0, 2.0, 6.0])

        y = ddqn_target(one_item_batch(2.5, True), online, target, gamma=0.9)

        np.testing.assert_allclose(y, [2.5])

    def test_discount_scales_bootstrap(self) -> None:
        online = FixedQ([0.0, 1.0])
        target = FixedQ([10.0, 4.0])

        y = ddqn_target(one_item_batch(0.0, False), online, target, gamma=0.5)

        np.testing.assert_allclose(y, [2.0])


@pytest.mark.unit
class TestEpisodeLog:
    def test_best_state_is_earliest_minimum(self) -> None:
        log = EpisodeLog(episode=0, distances=[3.0, 1.0, 1.0, 2.0])

        assert log.best_t == 1
        assert log.best_distance == 1.0

    def test_pruned_path_leads_to_best_state(self) -> None:
        actions = [ProcessAction(0.02), ProcessAction(-0.02), ProcessAction(0.0)]
        log = EpisodeLog(episode=0, actions=actions, distances=[3.0, 2.0, 0.5, 1.5])

        assert prune_best_subpath(log) == actions[:2]

    def test_initial_state_best_gives_empty_path(self) -> None:
        log = EpisodeLog(episode=0, actions=[ProcessAction(0.02)], distances=[0.1, 0.4])

        assert prune_best_subpath(log) == []


@pytest.mark.unit
class TestGoalSelection:
    def test_goal_set_must_not_be_empty(self) -> None:
        with pytest.raises(InvalidArgumentException):
            GoalSet([])

    def test_exploration_picks_uniform_goal(self, env: TextureProcessEnv) -> None:
        goals = GoalSet(
            [env.encode_goal(TextureFactory.create_random(8, seed=s)) for s in range(3)]
        )
        network = zero_network(env, len(goals.goals[0].features))
        rng = np.random.default_rng(0)

        picks = [select_goal(goals, env.reset(), network, 1.0, rng, env) for _ in range(30)]

        assert {selection for _, selection in picks} == {SelectionType.EXPLORE}
        assert {goal_id for goal_id, _ in picks} <= {0, 1, 2}

    @pytest.mark.parametrize(
        "value_kind", [GoalValueKind.DUELING_VALUE, GoalValueKind.MAX_Q]
    )
    def test_greedy_prefers_nearby_goal_when_values_tie(
        self, env: TextureProcessEnv, value_kind: GoalValueKind
    ) -> None:
        goals = GoalSet(
            [
                env.encode_goal(TextureFactory.create_random(8, seed=5)),
                env.encode_goal(env.initial_texture),
            ]
        )
        network = zero_network(
            env, len(goals.goals[0].features), dueling=value_kind == GoalValueKind.DUELING_VALUE
        )

        goal_id, selection = select_goal(
            goals, env.reset(), network, 0.0, np.random.default_rng(0), env, value_kind
        )

        assert (goal_id, selection) == (1, SelectionType.GREEDY)

    def test_duplicate_goals_rejected(self, env: TextureProcessEnv) -> None:
        texture = TextureFactory.create_random(8, seed=5)
        goals = GoalSet([env.encode_goal(texture), env.encode_goal(texture)])

        with pytest.raises(InvalidArgumentException):
            goals.check_distinct(env)


@pytest.mark.unit
class TestCommittedGoal:
    def test_most_frequent_greedy_goal_in_final_fifth(self) -> None:
        episodes = [episode_record(i, 0, SelectionType.GREEDY) for i in range(8)]
        episodes += [
            episode_record(8, 2, SelectionType.GREEDY),
            episode_record(9, 1, SelectionType.EXPLORE),
        ]

        assert run_result(episodes).committed_goal == 2

    def test_ties_resolve_to_lowest_goal_id(self) -> None:
        episodes = [episode_record(i, 0, SelectionType.EXPLORE) for i in range(8)]
        episodes += [
            episode_record(8, 3, SelectionType.GREEDY),
            episode_record(9, 1, SelectionType.GREEDY),
        ]

        assert run_result(episodes).committed_goal == 1

    def test_no_greedy_picks(self) -> None:
        episodes = [episode_record(i, 0, SelectionType.EXPLORE) for i in range(5)]

        assert run_result(episodes).committed_goal is None

    def test_single_goal_runs_have_no_commitment(self) -> None:
        episodes = [episode_record(i, 0, SelectionType.GREEDY) for i in range(5)]

        assert run_result(episodes, RunMode.SINGLE).committed_goal is None


@pytest.mark.unit
class TestDiscountConsistency:
    def test_trainer_rejects_mismatched_discount(self, env: TextureProcessEnv) -> None:
        agent = ConfigFactory.agent_config(gamma=0.9)

        with pytest.raises(InvalidArgumentException) as exc_info:
            run_single_goal(env, env.goal, agent)

        assert exc_info.value.details == {"agent_gamma": 0.9, "env_gamma": 1.0}
