"""Language familiarity effect toolkit: features, i-vectors, ABX and statistics."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config  # noqa: E402
from .errors import LfeError  # noqa: E402

__all__ = ["__version__", "ExperimentConfig", "LfeError", "load_config"]
