"""
Configuration settings for the deep contextual biasing toolkit
"""

import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

__version__ = "0.3.0"
FORMAT_VERSION = 1

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class Config:
    """Environment-level settings; experiment settings live in JSON configs"""

    # Logging Settings
    LOG_LEVEL = os.getenv("DEEPCLAS_LOG_LEVEL", "INFO").upper()
    LOG_FILE = os.getenv("DEEPCLAS_LOG_FILE", "")

    # Run Settings
    RUNS_DIR = os.getenv("DEEPCLAS_RUNS_DIR", "runs")
    THREADS = int(os.getenv("DEEPCLAS_THREADS", "1"))
    SEED = int(os.getenv("DEEPCLAS_SEED", "0"))

    @classmethod
    def get_logging_config(cls) -> Dict[str, Any]:
        """Get configuration for logging"""
        return {
            "level": cls.LOG_LEVEL,
            "log_file": cls.LOG_FILE or None,
        }

    @classmethod
    def validate_config(cls) -> bool:
        """Validate the environment configuration"""
        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"DEEPCLAS_LOG_LEVEL must be a logging level name, got {cls.LOG_LEVEL}")

        if cls.THREADS < 1:
            raise ConfigError("DEEPCLAS_THREADS must be at least 1")

        if cls.SEED < 0:
            raise ConfigError("DEEPCLAS_SEED must be non-negative")

        return True


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging: stderr always, plus a log file when requested"""
    settings = Config.get_logging_config()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = log_file or settings["log_file"]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level or settings["level"],
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def load_json_config(path: str) -> Dict[str, Any]:
    """Read a declarative JSON config file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return document


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides to a nested config document (in place)"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override {item!r} must look like path.to.field=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"Override {item!r} has an empty path")

        node = document
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = {}
                node[key] = child
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r}: {key} is not a section")
            node = child
        node[keys[-1]] = _parse_override_value(raw)
    return document
