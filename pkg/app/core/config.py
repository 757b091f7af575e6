# 系统配置管理
# Runtime Settings

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings, read from the environment or a .env file.

    Experiment parameters (geometry, weights, trajectories) live in the
    experiment JSON files instead; see app.models.schemas.
    """

    app_name: str = Field(default="Tensegrity Spine MPC")
    app_version: str = Field(default="1.0.0")

    # 日志配置
    log_level: str = Field(default="INFO")
    log_file: str = Field(default="logs/spine_mpc.log")
    log_to_file: bool = Field(default=False)

    # QP solver defaults
    qp_tolerance: float = Field(default=1e-8, gt=0)
    qp_max_iterations: int = Field(default=100, ge=1)

    # finite-difference perturbation for linearize()
    fd_delta: float = Field(default=1e-6, gt=0)

    # closed loop recovery policy
    max_consecutive_failures: int = Field(default=25, ge=1)

    output_dir: str = Field(default="runs/latest")
    sweep_workers: int = Field(default=2, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="SPINE_MPC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# 全局配置实例
settings = Settings()


def get_settings() -> Settings:
    """获取应用配置"""
    return settings
