"""Streaming sequence tagging with a hybrid unidirectional/bidirectional
encoder, waited restarts and an adaptive restart classifier."""

__version__ = "0.1.0"

from .data import TaggedSentence, Vocabulary
from .encoder import HybridConfig, HybridEncoder
from .policy import (
    ArmPolicy,
    EveryStep,
    FixedK,
    OracleSchedule,
    StreamingTranscript,
    run_stream,
)

__all__ = [
    "TaggedSentence",
    "Vocabulary",
    "HybridConfig",
    "HybridEncoder",
    "EveryStep",
    "FixedK",
    "OracleSchedule",
    "ArmPolicy",
    "StreamingTranscript",
    "run_stream",
    "__version__",
]
