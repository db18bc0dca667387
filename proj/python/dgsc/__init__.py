"""Local learning coefficient estimation and developmental stage analysis."""

from ._core import *  # noqa: F401,F403
from ._core import ConfigError, EstimationError, IoError, SgldConfig

__all__ = [name for name in dir() if not name.startswith("_")]
