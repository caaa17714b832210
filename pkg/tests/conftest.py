from pathlib import Path

import numpy as np
import pytest

from app.schemas.config import EnvConfig, MaterialParams
from app.services.odf_histogram import WeightedOrientationSet
from app.services.orientation_space import OrientationGrid, cached_uniform_grid
from app.services.process_env import TextureProcessEnv
from tests.utils import ConfigFactory, TextureFactory


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def material() -> MaterialParams:
    return MaterialParams()


@pytest.fixture(scope="session")
def small_grid() -> OrientationGrid:
    return cached_uniform_grid(64, 3)


@pytest.fixture
def env_config() -> EnvConfig:
    return ConfigFactory.env_config()


@pytest.fixture
def target_texture() -> WeightedOrientationSet:
    return TextureFactory.create_random(n=8, seed=42)


@pytest.fixture
def env(env_config: EnvConfig, target_texture: WeightedOrientationSet) -> TextureProcessEnv:
    return TextureProcessEnv(env_config, target=target_texture)


@pytest.fixture
def run_overrides(tmp_path: Path) -> dict:
    return ConfigFactory.run_overrides(tmp_path / "run")
