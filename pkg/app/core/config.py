from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="TEXTURE_",
        case_sensitive=False,
    )

    runs_dir: Path = Path("runs")
    log_level: str = "INFO"
    log_format: str = "%(levelname)s - %(name)s - %(message)s"

    # Fixed seeds of the shipped orientation sets (action rotations, grey texture).
    action_grid_seed: int = 7
    initial_texture_seed: int = 11

    metrics_textfile: bool = True


settings = Settings()
