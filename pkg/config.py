import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

DEFAULT_CCOPF_DIR = os.path.expanduser("~/.config/ccopf")
CONFIG_FILE_PATH = Path(DEFAULT_CCOPF_DIR) / "config.json"

DEFAULT_VERIFY_POINTS = 2 ** 16
DEFAULT_PENALTY_WEIGHT = 1.0e3


def config_path() -> Path:
    override = os.getenv("CCOPF_CONFIG")
    return Path(override) if override else CONFIG_FILE_PATH


def default_config() -> Dict[str, Any]:
    return {
        "last_network": None,
        "solver": {},
        "verify_points": DEFAULT_VERIFY_POINTS,
        "penalty_weight": DEFAULT_PENALTY_WEIGHT,
    }


def load_config() -> Dict[str, Any]:
    path = config_path()
    config = default_config()
    if path.exists():
        try:
            with open(path, 'r') as f:
                stored = json.load(f)
            if not isinstance(stored, dict):
                raise ValueError("top level must be an object")
            # Provide default values for keys missing from older files
            config.update(stored)
        except (json.JSONDecodeError, ValueError) as e:
            logger.warning("Could not parse config file %s (%s). Using default config.", path, e)
            return default_config()
    return config


def save_config(config: Dict[str, Any]) -> None:
    path = config_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(config, f, indent=4)


def worker_count(default: Optional[int] = None) -> int:
    """Worker threads allowed by CCOPF_THREADS, else the machine's CPU count."""
    value = os.getenv("CCOPF_THREADS")
    if value:
        try:
            threads = int(value)
        except ValueError:
            threads = 0
        if threads >= 1:
            return threads
        logger.warning("Ignoring CCOPF_THREADS=%r; expected a positive integer.", value)
    return default or os.cpu_count() or 1
