import numpy as np
import pytest

from app.core.enums import TerminalReason
from app.exceptions import InvalidArgumentException, StateException
from app.schemas.config import EnvConfig, build_run_config
from app.services.gsh_features import feature_labels
from app.services.odf_histogram import WeightedOrientationSet
from app.services.process_env import ProcessAction, TextureProcessEnv
from tests.utils import ConfigFactory, TextureFactory

NOOP = 12


@pytest.mark.integration
class TestActionSpace:
    def test_layout(self, env: TextureProcessEnv) -> None:
        space = env.action_space

        assert space.n == 13
        assert space.noop_id == NOOP
        assert space.decode(2).magnitude == pytest.approx(0.02)
        assert space.decode(8).magnitude == pytest.approx(-0.02)
        np.testing.assert_array_equal(space.decode(8).rotation, space.rotations[2])
        assert space.decode(NOOP).is_noop

    def test_kinds(self, env: TextureProcessEnv) -> None:
        kinds = [env.action_space.kind(a) for a in range(env.action_space.n)]

        assert kinds.count("tension") == 6
        assert kinds.count("compression") == 6
        assert kinds[-1] == "noop"

    def test_out_of_range_id(self, env: TextureProcessEnv) -> None:
        with pytest.raises(InvalidArgumentException):
            env.action_space.decode(13)
        with pytest.raises(InvalidArgumentException):
            env.action_space.decode(-1)

    def test_table_rows(self, env: TextureProcessEnv) -> None:
        table = env.action_space.table()

        assert [row["action_id"] for row in table] == list(range(13))
        assert table[NOOP]["f"] == 0.0
        assert (table[NOOP]["qw"], table[NOOP]["qx"]) == (1.0, 0.0)


@pytest.mark.integration
class TestReset:
    def test_initial_state(self, env: TextureProcessEnv) -> None:
        state = env.reset(seed=5)

        assert state.t == 0
        assert state.eq_strain == 0.0
        assert not state.done
        assert len(state.features) == env.state_dim == len(feature_labels()) + 2
        assert state.features[-2:].tolist() == [0.0, 0.0]
        assert state.distance == pytest.approx(
            env.metric.distance(env.initial_texture, env.goal.texture)
        )

    def test_step_before_reset(self, env: TextureProcessEnv) -> None:
        with pytest.raises(StateException):
            env.step(NOOP)

    def test_reset_restores_initial_texture(self, env: TextureProcessEnv) -> None:
        first = env.reset()
        env.step(0)

        again = env.reset()

        np.testing.assert_array_equal(again.features, first.features)
        assert env.aggregate.eq_strain == 0.0

    def test_without_target(self, env_config: EnvConfig) -> None:
        env = TextureProcessEnv(env_config)

        state = env.reset()
        _, reward, _, info = env.step(NOOP)

        assert np.isnan(state.distance)
        assert reward == 0.0
        assert info["raw_reward"] == 0.0


@pytest.mark.integration
class TestStep:
    def test_noop_changes_only_time(self, env: TextureProcessEnv) -> None:
        state = env.reset()

        next_state, reward, done, info = env.step(NOOP)

        assert next_state.t == 1
        assert not done
        assert next_state.distance == state.distance
        np.testing.assert_array_equal(next_state.features[:-2], state.features[:-2])
        assert next_state.features[-2] == pytest.approx(1 / env.config.horizon)
        assert reward == pytest.approx(0.0)
        assert info["magnitude"] == 0.0
        assert info["substeps"] == 0

    def test_tension_accumulates_strain(self, env: TextureProcessEnv) -> None:
        env.reset()

        state, _, _, info = env.step(0)

        assert state.eq_strain == pytest.approx(np.log(1.02), rel=0.1)
        assert state.features[-1] == state.eq_strain
        assert info["magnitude"] == pytest.approx(0.02)
        assert info["substeps"] > 0

    def test_identical_envs_are_deterministic(
        self, env_config: EnvConfig, target_texture: WeightedOrientationSet
    ) -> None:
        envs = [TextureProcessEnv(env_config, target=target_texture) for _ in range(2)]
        finals = []

        for env in envs:
            env.reset()
            for action_id in (0, 0, 9):
                state, _, _, _ = env.step(action_id)
            finals.append(state)

        np.testing.assert_array_equal(finals[0].features, finals[1].features)
        assert finals[0].distance == finals[1].distance

    def test_step_action_matches_step(
        self, env_config: EnvConfig, target_texture: WeightedOrientationSet
    ) -> None:
        by_id = TextureProcessEnv(env_config, target=target_texture)
        by_action = TextureProcessEnv(env_config, target=target_texture)
        by_id.reset()
        by_action.reset()

        state_id, _, _, _ = by_id.step(4)
        state_action, _, _, _ = by_action.step_action(by_id.action_space.decode(4))

        np.testing.assert_array_equal(state_id.features, state_action.features)


@pytest.mark.integration
class TestTermination:
    def test_horizon_pays_final_potential(self, env: TextureProcessEnv) -> None:
        env.reset()

        for _ in range(env.config.horizon - 1):
            _, _, done, _ = env.step(NOOP)
            assert not done
        state, _, done, info = env.step(NOOP)

        assert done
        assert env.terminal_reason == TerminalReason.HORIZON
        assert info["terminal_reason"] == "horizon"
        assert info["raw_reward"] == pytest.approx(env.potential(state.distance))
        assert info["potential"] == 0.0

    def test_step_after_done_raises(self, env: TextureProcessEnv) -> None:
        env.reset()
        for _ in range(env.config.horizon):
            env.step(NOOP)

        with pytest.raises(StateException):
            env.step(NOOP)

    def test_strain_cap_rejects_step_and_keeps_texture(
        self, target_texture: WeightedOrientationSet
    ) -> None:
        env = TextureProcessEnv(
            ConfigFactory.env_config(strain_cap=0.03), target=target_texture
        )
        env.reset()
        accepted, _, _, _ = env.step(0)

        rejected, _, done, info = env.step(0)

        assert done
        assert env.terminal_reason == TerminalReason.STRAIN_CAP
        assert info["magnitude"] == 0.0
        assert rejected.eq_strain == accepted.eq_strain
        assert rejected.distance == accepted.distance
        assert (accepted.t, rejected.t) == (1, 2)
        np.testing.assert_array_equal(rejected.features[:-2], accepted.features[:-2])
        with pytest.raises(StateException):
            env.step(NOOP)

    def test_simulation_failure_ends_episode(
        self, env_config: EnvConfig, target_texture: WeightedOrientationSet
    ) -> None:
        env = TextureProcessEnv(
            env_config,
            solver=ConfigFactory.solver_config(max_substeps=1),
            target=target_texture,
        )
        initial = env.reset()

        state, _, done, info = env.step(0)

        assert done
        assert info["terminal_reason"] == "sim_failure"
        assert state.eq_strain == 0.0
        assert state.distance == initial.distance
        assert state.t == initial.t + 1


@pytest.mark.integration
class TestRewards:
    def test_shaped_rewards_telescope_over_an_episode(
        self, target_texture: WeightedOrientationSet
    ) -> None:
        env = TextureProcessEnv(ConfigFactory.env_config(gamma=1.0), target=target_texture)
        initial = env.reset()
        total = 0.0

        for action_id in (0, 7, NOOP, 3, NOOP):
            state, reward, done, _ = env.step(action_id)
            total += reward

        assert done
        expected = env.potential(state.distance) - env.potential(initial.distance)
        assert total == pytest.approx(expected)

    def test_goal_encoding(self, env: TextureProcessEnv) -> None:
        goal = env.encode_goal(env.initial_texture)
        state = env.reset()

        assert env.goal_distance(state.histogram, goal) == 0.0
        assert len(goal.features) == len(feature_labels())

    def test_set_target_accepts_encoded_goal(self, env: TextureProcessEnv) -> None:
        goal = env.encode_goal(env.initial_texture)

        assert env.set_target(goal) is goal
        assert env.reset().distance == 0.0

    def test_unshaped_noop_pays_nothing_until_the_end(
        self, target_texture: WeightedOrientationSet
    ) -> None:
        env = TextureProcessEnv(
            ConfigFactory.env_config(shaping=False, horizon=2), target=target_texture
        )
        env.reset()

        _, first, _, _ = env.step(NOOP)
        state, last, _, _ = env.step_action(ProcessAction(0.0))

        assert first == 0.0
        assert last == pytest.approx(env.potential(state.distance))


@pytest.fixture(scope="module")
def desk_env() -> TextureProcessEnv:
    return TextureProcessEnv(build_run_config(preset="desk").env)


@pytest.mark.integration
@pytest.mark.slow
class TestRewardTelescopingOnDeskScale:
    @pytest.mark.parametrize("seed", range(100))
    def test_random_episode_telescopes(self, desk_env: TextureProcessEnv, seed: int) -> None:
        rng = np.random.default_rng(seed)
        desk_env.set_target(TextureFactory.create_random(n=50, seed=seed))
        initial = desk_env.reset(seed)
        total, done = 0.0, False

        while not done:
            state, reward, done, _ = desk_env.step(int(rng.integers(desk_env.action_space.n)))
            total += reward

        assert desk_env.config.gamma == 1.0
        expected = desk_env.potential(state.distance) - desk_env.potential(initial.distance)
        assert total == pytest.approx(expected, rel=0, abs=1e-9)
