from functools import lru_cache
from typing import Dict, List, Optional, Tuple

from pydantic_settings import BaseSettings, SettingsConfigDict


DEFAULT_BANDS: Dict[str, Tuple[float, float]] = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 14.0),
    "beta": (14.0, 31.0),
    "gamma": (31.0, 70.0),
}


class Settings(BaseSettings):
    """Process-wide defaults, overridable through EEGSSL_* variables or .env."""

    model_config = SettingsConfigDict(env_prefix="EEGSSL_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    out_dir: str = "runs"
    registry_url: Optional[str] = None

    # ------- preprocessing -------
    source_rate_hz: float = 1000.0
    target_rate_hz: float = 200.0
    bandpass_low_hz: float = 0.5
    bandpass_high_hz: float = 70.0
    filter_order: int = 4
    notch_hz: float = 50.0
    notch_q: float = 30.0
    segment_seconds: int = 8
    window_seconds: int = 1
    band_edges: Dict[str, Tuple[float, float]] = DEFAULT_BANDS

    # ------- training -------
    unlabeled_batch_size: int = 64
    hidden_size: int = 256
    default_seeds: List[int] = [0, 1, 2, 3, 4]

    # ------- exports -------
    grid_res: int = 200

    def resolved_registry_url(self, out_dir: Optional[str] = None) -> str:
        if self.registry_url:
            return self.registry_url
        return f"sqlite:///{out_dir or self.out_dir}/registry.db"


@lru_cache
def get_settings() -> Settings:
    return Settings()
