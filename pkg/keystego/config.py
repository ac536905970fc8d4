"""
Process-level configuration for keystego.

Run-level hyper-parameters live in `keystego.models.RunConfig`; this module only
holds what varies per machine or per shell: paths, logging, device and the
run-time key material.
"""
from pathlib import Path
from typing import Optional

from pydantic import Field, SecretStr, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables (KEYSTEGO_*)."""

    model_config = SettingsConfigDict(
        env_prefix="KEYSTEGO_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # ============================================
    # Compute
    # ============================================
    device: str = Field(default="cpu")
    num_threads: int = Field(default=0, ge=0)

    @field_validator("device")
    @classmethod
    def validate_device(cls, v: str) -> str:
        """Accept cpu, cuda and cuda:<n>."""
        v = v.strip().lower()
        if v != "cpu" and not v.startswith("cuda"):
            raise ValueError(f"Unsupported device '{v}' (expected cpu or cuda[:n])")
        return v

    # ============================================
    # Key material
    # ============================================
    # "embed:recover,embed:recover,..." in decimal or 0x-hex; never logged
    keys: Optional[SecretStr] = Field(default=None)

    # ============================================
    # Data Paths
    # ============================================
    runs_dir: str = Field(default="runs")
    data_dir: str = Field(default="data")

    # ============================================
    # Logging
    # ============================================
    log_level: str = Field(default="INFO")
    log_file: str = Field(default="logs/keystego.log")

    # ============================================
    # Constants
    # ============================================
    PSNR_CAP_DB: float = 100.0
    PSNR_CAP_MSE: float = 1e-10
    RESIDUAL_GAIN: float = 5.0

    # ============================================
    # Path Properties
    # ============================================
    @property
    def runs_path(self) -> Path:
        return Path(self.runs_dir)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)

    @property
    def log_path(self) -> Path:
        return Path(self.log_file)

    def ensure_directories(self):
        """Create necessary directories if they don't exist."""
        self.runs_path.mkdir(parents=True, exist_ok=True)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)


# Global settings instance
settings = Settings()
