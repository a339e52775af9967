"""Compound-token symbolic music modeling library."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DecodeError, FugatoError, MidiParseError
from .midi import CorpusSplit, FilterCriteria, NoteEvent, Piece
from .vocab import FeatureConfig, FeatureVocab, build_vocab

__all__ = [
    "ConfigError",
    "CorpusSplit",
    "DataError",
    "DecodeError",
    "FeatureConfig",
    "FeatureVocab",
    "FilterCriteria",
    "FugatoError",
    "MidiParseError",
    "NoteEvent",
    "Piece",
    "build_vocab",
    "__version__",
]
