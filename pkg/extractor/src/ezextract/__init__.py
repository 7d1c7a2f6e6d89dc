"""Probe a (target, reference) pair of causal LMs into trace files."""

__version__ = "0.1.0"

from .config import ExtractionConfig  # noqa: F401
from .extract import TokenizerMismatchError, extract  # noqa: F401
from .splits import SplitIds, make_splits  # noqa: F401
