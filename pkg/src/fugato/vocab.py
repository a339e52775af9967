"""Feature vocabularies for the token encodings.

Every feature owns an ordered list of special symbols followed by its
musical values; the value<->index mapping is a bijection and survives JSON
round trips. Specials are shared across features (pad, bos, ignore,
continue); the beat feature additionally owns the bar marker used by the
interleaved-family encoding.

Binned features: tempo uses 24 geometric bins spanning [30, 240] BPM whose
representatives are snapped to values exactly expressible as a MIDI tempo
(microseconds per quarter), so written files parse back to the identical
BPM. Velocity uses 32 uniform bins over [1, 127] with integer
representatives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import chords, instruments
from .errors import ConfigError, DataError
from .midi import Piece

PAD = "<pad>"
BOS = "<bos>"
IGNORE = "<ignore>"
CONTINUE = "<continue>"
BAR = "<bar>"

BASE_SPECIALS = (PAD, BOS, IGNORE, CONTINUE)

METRIC_VALUES = ("SSS", "NSS", "NNS", "NNN")
TYPE_VALUES = ("metric", "note")

TEMPO_BINS = 24
TEMPO_RANGE = (30.0, 240.0)
VELOCITY_BINS = 32
VELOCITY_RANGE = (1, 127)
DURATION_CAP_MEASURES = 4

PAD_INDEX = 0
BOS_INDEX = 1
IGNORE_INDEX = 2
CONTINUE_INDEX = 3


def tempo_bin_edges(n_bins: int = TEMPO_BINS, lo: float = TEMPO_RANGE[0],
                    hi: float = TEMPO_RANGE[1]) -> list[float]:
    """Geometric bin edges: n_bins+1 values with a constant ratio."""
    ratio = (hi / lo) ** (1.0 / n_bins)
    return [lo * ratio**k for k in range(n_bins + 1)]


def _mpqn_exact(bpm: float) -> float:
    """Snap a BPM to the nearest value exactly representable in SMF tempo bytes."""
    return 60_000_000.0 / round(60_000_000.0 / bpm)


def tempo_bin_values(n_bins: int = TEMPO_BINS) -> list[float]:
    lo, hi = TEMPO_RANGE
    ratio = (hi / lo) ** (1.0 / n_bins)
    return [_mpqn_exact(lo * ratio ** (k + 0.5)) for k in range(n_bins)]


def velocity_bin_values(n_bins: int = VELOCITY_BINS) -> list[int]:
    lo, hi = VELOCITY_RANGE
    width = (hi - lo) / n_bins
    return [int(math.floor(lo + (k + 0.5) * width + 0.5)) for k in range(n_bins)]


@dataclass(frozen=True)
class FeatureConfig:
    """Which optional features are active; beat/pitch/duration always are."""

    instrument: bool = True
    chord: bool = True
    tempo: bool = True
    velocity: bool = True

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument,
            "chord": self.chord,
            "tempo": self.tempo,
            "velocity": self.velocity,
        }

    @staticmethod
    def from_dict(obj: dict) -> "FeatureConfig":
        return FeatureConfig(**obj)


@dataclass
class Feature:
    """One feature's ordered symbol list: specials first, then musical values."""

    name: str
    specials: tuple[str, ...]
    values: list

    def __post_init__(self):
        self._index = {}
        for i, s in enumerate(self.specials):
            self._index[s] = i
        for i, v in enumerate(self.values):
            self._index[v] = len(self.specials) + i

    @property
    def size(self) -> int:
        return len(self.specials) + len(self.values)

    def index(self, value) -> int:
        try:
            return self._index[value]
        except KeyError:
            raise DataError(f"value {value!r} not in feature {self.name!r}") from None

    def value(self, index: int):
        if index < len(self.specials):
            return self.specials[index]
        return self.values[index - len(self.specials)]

    def is_special(self, index: int) -> bool:
        return index < len(self.specials)

    def clamp_index(self, value) -> tuple[int, bool]:
        """Index of the nearest musical value; flags whether clamping happened.

        Only meaningful for numeric features (duration, velocity, tempo).
        """
        if value in self._index:
            return self._index[value], False
        nearest = min(self.values, key=lambda v: (abs(v - value), v))
        return self._index[nearest], True


class FeatureVocab:
    """Per-feature value<->index maps plus the grid metadata they derive from."""

    def __init__(self, resolution: int, time_signature: tuple[int, int],
                 config: FeatureConfig):
        if resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {resolution}")
        self.resolution = resolution
        self.time_signature = tuple(time_signature)
        self.config = config

        measure_len = self.time_signature[0] * resolution
        duration_cap = DURATION_CAP_MEASURES * measure_len
        self.features: dict[str, Feature] = {}

        def add(name, values, specials=BASE_SPECIALS):
            self.features[name] = Feature(name, tuple(specials), list(values))

        add("metric", METRIC_VALUES)
        add("type", TYPE_VALUES)
        add("beat", range(measure_len), specials=BASE_SPECIALS + (BAR,))
        add("chord", (chords.NO_CHORD,) + chords.CHORD_SYMBOLS)
        add("tempo", tempo_bin_values())
        add("instrument", instruments.CLASS_NAMES)
        add("pitch", range(128))
        add("duration", range(1, duration_cap + 1))
        add("velocity", velocity_bin_values())

    @property
    def measure_length(self) -> int:
        return self.time_signature[0] * self.resolution

    @property
    def duration_cap(self) -> int:
        return DURATION_CAP_MEASURES * self.measure_length

    def __getitem__(self, name: str) -> Feature:
        return self.features[name]

    def active_note_features(self) -> list[str]:
        names = []
        if self.config.instrument:
            names.append("instrument")
        names.extend(["pitch", "duration"])
        if self.config.velocity:
            names.append("velocity")
        return names

    def active_state_features(self) -> list[str]:
        names = ["beat"]
        if self.config.chord:
            names.append("chord")
        if self.config.tempo:
            names.append("tempo")
        return names

    def tempo_value(self, bpm: float) -> float:
        """Representative BPM of the bin containing bpm (clamped to range)."""
        lo, hi = TEMPO_RANGE
        bpm = min(max(bpm, lo), hi)
        k = int(TEMPO_BINS * math.log(bpm / lo) / math.log(hi / lo))
        k = min(k, TEMPO_BINS - 1)
        return self["tempo"].values[k]

    def velocity_value(self, velocity: int) -> int:
        lo, hi = VELOCITY_RANGE
        velocity = min(max(velocity, lo), hi)
        width = (hi - lo) / VELOCITY_BINS
        k = min(int((velocity - lo) / width), VELOCITY_BINS - 1)
        return self["velocity"].values[k]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "resolution": self.resolution,
                "time_signature": list(self.time_signature),
                "config": self.config.to_dict(),
                "features": {
                    name: {"specials": list(f.specials), "values": f.values}
                    for name, f in self.features.items()
                },
            },
            indent=1,
        )

    @staticmethod
    def from_json(text: str) -> "FeatureVocab":
        obj = json.loads(text)
        vocab = FeatureVocab(
            obj["resolution"],
            tuple(obj["time_signature"]),
            FeatureConfig.from_dict(obj["config"]),
        )
        for name, spec in obj["features"].items():
            rebuilt = Feature(name, tuple(spec["specials"]), spec["values"])
            current = vocab.features.get(name)
            if current is None or current.specials != rebuilt.specials or \
                    current.values != rebuilt.values:
                vocab.features[name] = rebuilt
        return vocab


def build_vocab(corpus: list[Piece], config: FeatureConfig | None = None) -> FeatureVocab:
    """Build the vocabulary for a corpus quantized at a single resolution.

    All pieces must share one resolution and one time signature (constant
    meter is what keeps beat and duration ranges well-defined).
    """
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    config = config or FeatureConfig()
    resolutions = {p.resolution for p in corpus}
    if len(resolutions) != 1:
        raise DataError(f"corpus mixes resolutions {sorted(resolutions)}")
    signatures = {p.time_signature for p in corpus}
    if None in signatures:
        raise DataError("corpus contains pieces without a time signature")
    if len(signatures) != 1:
        raise DataError(f"corpus mixes time signatures {sorted(signatures)}")
    return FeatureVocab(resolutions.pop(), signatures.pop(), config)
