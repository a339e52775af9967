"""Cross-encoding NLL evaluation.

Two pieces of machinery make flat and compound models comparable:

- moving-window scoring: every token is scored exactly once, inside a
  window where it has (near-)full context; only the trailing ``stride``
  positions of each window count, except the first window which counts
  everything.
- probability accumulation: sub-tokens the flattened encoding omits
  (unchanged state) multiply their probability into the next matched
  sub-token, so each comparable event carries the same chain-rule mass a
  flat model spends on its corresponding token.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import encoding
from .errors import ConfigError, DataError
from .midi import Piece
from .model import CompoundModel
from .vocab import FeatureVocab, IGNORE_INDEX

REMI_FEATURE_ORDER = ("bar", "beat", "chord", "tempo",
                      "instrument", "pitch", "duration", "velocity")


@dataclass
class NllReport:
    """Per-feature and mean NLL with the counts behind them.

    ``mean_per_prediction`` averages over every scored event;
    ``mean_over_features`` averages the per-feature means (both appear in
    the serialized report since either reading of a table's "Mean" column
    is defensible).
    """

    scheme: str
    window: int
    stride: int
    adjusted: bool
    nll_sums: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    n_pieces: int = 0
    flags: list[str] = field(default_factory=list)

    def add(self, feature: str, nll: float) -> None:
        self.nll_sums[feature] = self.nll_sums.get(feature, 0.0) + nll
        self.counts[feature] = self.counts.get(feature, 0) + 1

    def feature_means(self) -> dict[str, float]:
        return {
            f: self.nll_sums[f] / self.counts[f]
            for f in self.nll_sums
            if self.counts[f] > 0
        }

    @property
    def total_nll(self) -> float:
        return sum(self.nll_sums.values())

    @property
    def total_count(self) -> int:
        return sum(self.counts.values())

    @property
    def mean_per_prediction(self) -> float:
        return self.total_nll / max(self.total_count, 1)

    @property
    def mean_over_features(self) -> float:
        means = self.feature_means()
        return sum(means.values()) / max(len(means), 1)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "window": self.window,
            "stride": self.stride,
            "adjusted": self.adjusted,
            "n_pieces": self.n_pieces,
            "mean_per_prediction": self.mean_per_prediction,
            "mean_over_features": self.mean_over_features,
            "feature_means": self.feature_means(),
            "counts": self.counts,
            "flags": sorted(set(self.flags)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["feature", "mean_nll", "count"])
        for feature in sorted(self.feature_means()):
            writer.writerow(
                [feature, f"{self.feature_means()[feature]:.6f}",
                 self.counts[feature]]
            )
        writer.writerow(["mean_per_prediction",
                         f"{self.mean_per_prediction:.6f}", self.total_count])
        writer.writerow(["mean_over_features",
                         f"{self.mean_over_features:.6f}", len(self.feature_means())])
        return buf.getvalue()


class ModelScorer:
    """Teacher-forced per-slot log-probabilities from a trained model."""

    def __init__(self, model: CompoundModel):
        self.model = model

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        loss_mask = tokens != IGNORE_INDEX
        out = self.model.forward_teacher_forced(
            tokens[None], loss_mask[None], want_logprobs=True
        )
        return out.logprobs[0]


def moving_window_nll(scorer, tokens: np.ndarray, window: int,
                      stride: int) -> tuple[np.ndarray, list[str]]:
    """Per-slot log-probabilities with every position scored exactly once.

    ``scorer(window_tokens) -> [W, F] log-probs`` is called per window
    (teacher-forced, sequence start prepended by the scorer itself). The
    first window scores all its positions, subsequent windows only their
    final ``stride`` ones; the last window is right-aligned.
    """
    if not 1 <= stride <= window:
        raise ConfigError(f"stride {stride} outside [1, window={window}]")
    t = len(tokens)
    flags: list[str] = []
    if t <= window:
        if t < window:
            flags.append("piece_shorter_than_window")
        return scorer(tokens), flags

    logprobs = np.zeros(tokens.shape, dtype=np.float64)
    next_pos = 0
    start = 0
    while next_pos < t:
        start = min(start, t - window)
        end = start + window
        scored = scorer(tokens[start:end])
        logprobs[next_pos:end] = scored[next_pos - start : end - start]
        next_pos = end
        start += stride
    return logprobs, flags


def adjust_compound_nll(
    logprobs: np.ndarray,
    scored_mask: np.ndarray,
    alignment: encoding.RemiAlignment,
) -> tuple[np.ndarray, list[str], list[str]]:
    """Accumulate omitted sub-token probabilities into the next matched one.

    ``logprobs``/``scored_mask`` are [T, F]; the alignment walks the same
    flattened slot order. Returns one comparable log-probability per
    matched (REMI-comparable) event, the matched events' REMI feature
    names, and flags. Probability mass is moved, never created: the
    matched log-probs sum to the scored slot log-probs (up to a flagged
    leftover at sequence end, attributed to the final event).
    """
    out: list[float] = []
    features: list[str] = []
    flags: list[str] = []
    carried = 0.0
    for entry in alignment.entries:
        if not scored_mask[entry.token_index, entry.slot_index]:
            if entry.matched:
                raise DataError(
                    "alignment marks an unscored sub-token as matched"
                )
            continue
        lp = float(logprobs[entry.token_index, entry.slot_index])
        if entry.matched:
            out.append(lp + carried)
            features.append(entry.remi_feature)
            carried = 0.0
        else:
            carried += lp
    if carried != 0.0:
        if not out:
            raise DataError("sequence with no matched sub-tokens")
        out[-1] += carried
        flags.append("leftover_mass_at_sequence_end")
    return np.asarray(out), features, flags


def evaluate_sequences(
    scorer,
    sequences: list[encoding.TokenSequence],
    window: int,
    stride: int,
    adjust: bool | None = None,
) -> NllReport:
    """Score encoded pieces; compound schemes get the REMI adjustment."""
    if not sequences:
        raise DataError("nothing to evaluate")
    scheme = sequences[0].scheme
    if adjust is None:
        adjust = scheme.name in ("cp", "nb-mf", "nb-pf")
    report = NllReport(scheme.name, window, stride, adjusted=adjust)

    for seq in sequences:
        logprobs, flags = moving_window_nll(scorer, seq.tokens, window, stride)
        report.flags.extend(flags)
        report.n_pieces += 1
        if adjust:
            alignment = encoding.align_to_remi(seq)
            scored = seq.tokens != IGNORE_INDEX
            comparable, features, adj_flags = adjust_compound_nll(
                logprobs, scored, alignment
            )
            report.flags.extend(adj_flags)
            for feature, lp in zip(features, comparable):
                report.add(feature, -float(lp))
        elif scheme.name == "remi":
            rvocab = encoding._remi_vocab(seq.vocab)
            for t in range(len(seq.tokens)):
                feature = rvocab.entry(int(seq.tokens[t, 0]))[0]
                report.add(feature, -float(logprobs[t, 0]))
        else:
            for t in range(len(seq.tokens)):
                for s, name in enumerate(scheme.features):
                    if seq.tokens[t, s] != IGNORE_INDEX:
                        report.add(name, -float(logprobs[t, s]))
    return report


def evaluate_corpus(
    model: CompoundModel,
    pieces: list[Piece],
    vocab: FeatureVocab,
    scheme_name: str,
    window: int | None = None,
    stride: int | None = None,
) -> NllReport:
    """Encode a test split and evaluate a trained model over it."""
    scheme = encoding.scheme_for(scheme_name, vocab)
    if tuple(scheme.sizes) != tuple(s for _, s in model.config.features):
        raise ConfigError(
            f"model feature sizes {model.config.features} do not match "
            f"scheme {scheme_name} sizes {scheme.sizes}"
        )
    window = window or model.config.max_sequence_length
    stride = stride or max(1, window // 2)
    sequences = [encoding.encode(p, vocab, scheme_name) for p in pieces]
    return evaluate_sequences(ModelScorer(model), sequences, window, stride)
