"""Configuration module for loading environment variables."""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    """Process-wide defaults from environment variables; CLI flags override them."""

    # Logging
    LOG_LEVEL = os.getenv("UNITE_LOG_LEVEL", "INFO").upper()

    # Determinism: one thread gives bit-identical replays
    THREADS = int(os.getenv("UNITE_THREADS", "1"))
    SEED = int(os.getenv("UNITE_SEED", "0"))

    # Where `unite train` writes checkpoints and logs
    OUTPUT_DIR = os.getenv("UNITE_OUTPUT_DIR", "runs")

    # Multiplies every tolerance of `unite check`
    CHECK_TOLERANCE_SCALE = float(os.getenv("UNITE_CHECK_TOLERANCE_SCALE", "1.0"))

    @classmethod
    def validate(cls) -> bool:
        """Validate that the configuration values are usable."""
        return cls.LOG_LEVEL in LOG_LEVELS and cls.THREADS >= 1 and cls.CHECK_TOLERANCE_SCALE > 0


# Global config instance
config = Config()
