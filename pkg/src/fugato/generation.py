"""Autoregressive sampling: nucleus/top-p with temperature, grammar
masking, prompt extraction, and MIDI-ready decoding of generated tokens.

Grammar masking removes structurally impossible sub-token choices (beat
moving backwards inside a measure, note slots on a metric-family token,
specials where a musical value is due) so that every sampled sequence
decodes. Slots whose value is structurally forced (ignore slots of the
off-family, the leading slots of the first pitch-first token) are written
directly instead of sampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoding
from .encoding import SchemeSpec, TokenSequence
from .errors import ConfigError, DataError
from .midi import Piece
from .model import CompoundModel
from .vocab import BAR, CONTINUE_INDEX, FeatureVocab, IGNORE_INDEX

TEMPERATURE_SEARCH_RANGE = (1.0, 1.3)


@dataclass
class SamplerConfig:
    top_p: float = 0.99
    temperature: float = 1.1
    temperature_range: tuple[float, float] = TEMPERATURE_SEARCH_RANGE
    max_tokens: int = 256
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p {self.top_p} outside (0, 1]")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature {self.temperature} must be positive")


def nucleus_sample(logits: np.ndarray, top_p: float, temperature: float,
                   rng: np.random.Generator) -> int:
    """Temperature-scaled top-p sampling.

    Keeps the smallest descending-probability prefix with cumulative mass
    >= top_p, renormalizes, and draws from it.
    """
    logits = np.asarray(logits, dtype=np.float64)
    finite = np.isfinite(logits)
    if not finite.any():
        raise DataError("all sampling logits are masked")
    scaled = np.where(finite, logits / temperature, -np.inf)
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()

    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    keep = int(np.searchsorted(cumulative, top_p, side="left")) + 1
    kept = order[:keep]
    kept_probs = probs[kept]
    kept_probs /= kept_probs.sum()
    return int(rng.choice(kept, p=kept_probs))


# ---------------------------------------------------------------------------
# Grammar state machines


class _MaskHelper:
    def __init__(self, vocab: FeatureVocab, scheme: SchemeSpec):
        self.vocab = vocab
        self.scheme = scheme

    def musical(self, feature: str) -> np.ndarray:
        f = self.vocab[feature]
        mask = np.zeros(f.size, dtype=bool)
        mask[len(f.specials):] = True
        return mask

    def values(self, feature: str, values) -> np.ndarray:
        f = self.vocab[feature]
        mask = np.zeros(f.size, dtype=bool)
        for v in values:
            mask[f.index(v)] = True
        return mask


class _NbGrammar(_MaskHelper):
    """Slot masks for the note-based schemes (either grouping)."""

    def __init__(self, vocab, scheme):
        super().__init__(vocab, scheme)
        self.position: int | None = None
        self.pitch_first = scheme.name == "nb-pf"
        self.tokens_seen = 0
        self.mlen = vocab.measure_length

    def forced(self, slot: int, row: list[int]) -> int | None:
        name = self.scheme.features[slot]
        if self.pitch_first and self.tokens_seen == 0 and \
                name in ("pitch", "duration", "velocity"):
            return IGNORE_INDEX
        return None

    def allowed(self, slot: int, row: list[int]) -> np.ndarray:
        name = self.scheme.features[slot]
        first_note = self.position is None
        if name == "metric":
            if first_note:
                return self.values("metric", ["SSS"])
            legal = ["NSS", "NNN"]
            if self.position < self.mlen - 1:
                legal.append("NNS")
            return self.values("metric", legal)
        if name == "beat":
            metric_slot = self.scheme.features.index("metric")
            metric = self.vocab["metric"].value(row[metric_slot])
            if metric in ("SSS", "NSS"):
                return self.musical("beat")
            if metric == "NNS":
                return self.values(
                    "beat", range(self.position + 1, self.mlen)
                )
            return self.values("beat", [self.position])
        if name in ("chord", "tempo"):
            mask = self.musical(name)
            if not first_note:
                mask[CONTINUE_INDEX] = True
            return mask
        return self.musical(name)

    def advance(self, row: list[int]) -> None:
        beat_slot = self.scheme.features.index("beat")
        if row[beat_slot] != IGNORE_INDEX:
            self.position = self.vocab["beat"].value(row[beat_slot])
        self.tokens_seen += 1


class _CpGrammar(_MaskHelper):
    def __init__(self, vocab, scheme):
        super().__init__(vocab, scheme)
        self.position: int | None = None
        self.started = False
        self.mlen = vocab.measure_length

    def forced(self, slot: int, row: list[int]) -> int | None:
        name = self.scheme.features[slot]
        if name == "type":
            return None
        kind = self.vocab["type"].value(row[0])
        if kind == "metric" and name in ("instrument", "pitch",
                                         "duration", "velocity"):
            return IGNORE_INDEX
        if kind == "note" and name in ("beat", "chord", "tempo"):
            return IGNORE_INDEX
        return None

    def allowed(self, slot: int, row: list[int]) -> np.ndarray:
        name = self.scheme.features[slot]
        if name == "type":
            if self.position is None:
                return self.values("type", ["metric"])
            return self.musical("type")
        if name == "beat":
            mask = self.values("beat", [BAR])
            if self.started:
                lo = 0 if self.position is None else self.position
                mask |= self.values("beat", range(lo, self.mlen))
            return mask
        if name in ("chord", "tempo"):
            mask = self.musical(name)
            mask[CONTINUE_INDEX] = True
            return mask
        return self.musical(name)

    def advance(self, row: list[int]) -> None:
        if self.vocab["type"].value(row[0]) == "metric":
            value = self.vocab["beat"].value(row[self.scheme.features.index("beat")])
            if value == BAR:
                self.started = True
                self.position = None
            else:
                self.position = value


class _RemiGrammar:
    """Token-level state machine over the shared flat vocabulary."""

    def __init__(self, vocab: FeatureVocab, scheme: SchemeSpec):
        self.vocab = vocab
        self.rvocab = encoding._remi_vocab(vocab)
        self.size = len(self.rvocab)
        self.note_order = [
            f for f in ("instrument", "pitch", "duration", "velocity")
            if self._feature_indices(f).size
        ]
        self.position: int | None = None
        self.started = False
        self.group: list[str] = []

    def _feature_indices(self, feature: str) -> np.ndarray:
        return np.array(
            [i for i, (f, _) in enumerate(self.rvocab.entries) if f == feature],
            dtype=int,
        )

    def _mask(self, features, beat_above: int | None = None) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for f in features:
            idx = self._feature_indices(f)
            if f == "beat" and beat_above is not None:
                idx = np.array(
                    [i for i in idx if self.rvocab.entry(i)[1] > beat_above],
                    dtype=int,
                )
            mask[idx] = True
        return mask

    def forced(self, slot: int, row: list[int]) -> int | None:
        return None

    def allowed(self, slot: int, row: list[int]) -> np.ndarray:
        if self.group:
            return self._mask([self.note_order[len(self.group)]])
        if not self.started:
            return self._mask(["bar"])
        options = ["bar"]
        if self.position is None:
            options.append("beat")
            return self._mask(options)
        options += ["chord", "tempo", self.note_order[0]]
        mask = self._mask(options)
        mask |= self._mask(["beat"], beat_above=self.position)
        return mask

    def advance(self, row: list[int]) -> None:
        feature, value = self.rvocab.entry(int(row[0]))
        if feature == "bar":
            self.started = True
            self.position = None
            return
        if feature == "beat":
            self.position = value
            return
        if feature in self.note_order:
            self.group.append(feature)
            if len(self.group) == len(self.note_order):
                self.group = []


class _OpenGrammar:
    """Synthetic schemes: any musical value, specials excluded."""

    def __init__(self, scheme: SchemeSpec, n_specials: int = 4):
        self.scheme = scheme
        self.n_specials = n_specials

    def forced(self, slot: int, row: list[int]) -> int | None:
        return None

    def allowed(self, slot: int, row: list[int]) -> np.ndarray:
        mask = np.zeros(self.scheme.sizes[slot], dtype=bool)
        mask[self.n_specials:] = True
        return mask

    def advance(self, row: list[int]) -> None:
        pass


def grammar_for(scheme: SchemeSpec, vocab: FeatureVocab | None):
    if scheme.name in ("nb-mf", "nb-pf"):
        return _NbGrammar(vocab, scheme)
    if scheme.name == "cp":
        return _CpGrammar(vocab, scheme)
    if scheme.name == "remi":
        return _RemiGrammar(vocab, scheme)
    return _OpenGrammar(scheme)


# ---------------------------------------------------------------------------
# Generation


def extract_prompt(piece: Piece, vocab: FeatureVocab, scheme_name: str,
                   measures: int = 4) -> TokenSequence:
    """Tokens covering the piece's first ``measures`` complete measures."""
    seq = encoding.encode(piece, vocab, scheme_name)
    cut = encoding.prompt_cut_index(seq, measures)
    return TokenSequence(seq.scheme, seq.tokens[:cut].copy(), vocab,
                         f"{piece.source_id}:prompt{measures}")


def generate(
    model: CompoundModel,
    scheme: SchemeSpec,
    sampler: SamplerConfig,
    prompt: np.ndarray | None = None,
    vocab: FeatureVocab | None = None,
) -> np.ndarray:
    """Sample ``sampler.max_tokens`` new compound tokens after the prompt.

    The prompt may be empty (unconditional). Sub-tokens are sampled
    sequentially through the model's sub-decoder; the scheme grammar masks
    impossible values and fills forced (ignore) slots directly. Greedy
    mode takes the argmax instead of sampling. Deterministic under
    ``sampler.seed``.
    """
    width = scheme.width
    if prompt is None:
        prompt = np.zeros((0, width), dtype=np.int32)
    prompt = np.asarray(prompt, dtype=np.int32)
    if prompt.ndim != 2 or prompt.shape[1] != width:
        raise DataError(f"prompt shape {prompt.shape} does not fit scheme "
                        f"{scheme.name}")
    max_len = model.config.max_sequence_length
    if len(prompt) >= max_len:
        raise DataError(
            f"prompt of {len(prompt)} tokens exceeds the model's "
            f"{max_len}-token window"
        )

    grammar = grammar_for(scheme, vocab)
    for row in prompt:
        grammar.advance([int(x) for x in row])

    rng = np.random.default_rng(sampler.seed)
    tokens = prompt.copy()
    total = min(sampler.max_tokens, max_len - len(prompt))
    w = model.config.enricher_window

    with ad.no_grad():
        for _ in range(total):
            t = len(tokens)
            hidden = model.hidden_states(tokens[None])
            h = hidden[0, t]
            window = None
            if model.config.subdecoder_kind == "nmt":
                window = hidden[0, max(0, t - w + 1) : t + 1]

            row: list[int] = []
            for slot in range(width):
                forced = grammar.forced(slot, row)
                if forced is not None:
                    row.append(forced)
                    continue
                logits = model.next_subtoken_logits(h, slot, row, window)
                mask = grammar.allowed(slot, row)
                if not mask.any():
                    raise DataError(f"grammar leaves no legal value for slot {slot}")
                masked = np.where(mask, logits.astype(np.float64), -np.inf)
                if sampler.greedy:
                    choice = int(np.argmax(masked))
                else:
                    choice = nucleus_sample(masked, sampler.top_p,
                                            sampler.temperature, rng)
                row.append(choice)
            grammar.advance(row)
            tokens = np.concatenate(
                [tokens, np.asarray(row, dtype=np.int32)[None]], axis=0
            )
    return tokens


def decode_generated(
    seq: TokenSequence, drop_trailing_measure: bool = True
) -> Piece:
    """Decode sampled tokens, tolerating a forcibly truncated tail.

    The pitch-first grouping leaves the final note unflushed and the flat
    encoding may stop mid note group; both tails are trimmed. When
    ``drop_trailing_measure`` is set, notes in the final occupied measure
    are dropped (generation stopped mid-measure), unless that would empty
    the piece.
    """
    tokens = seq.tokens
    vocab = seq.vocab
    if seq.scheme.name == "nb-pf" and len(tokens) >= 2:
        # a forcibly stopped sequence leaves the final note unflushed; turn
        # the last row into a terminal one (keep its flush, drop its state)
        state_slots = [s for s, f in enumerate(seq.scheme.features)
                       if f not in ("pitch", "duration", "velocity")]
        last = tokens[-1]
        if any(int(last[s]) != IGNORE_INDEX for s in state_slots):
            fixed = last.copy()
            fixed[state_slots] = IGNORE_INDEX
            tokens = np.concatenate([tokens[:-1], fixed[None]], axis=0)
    if seq.scheme.name == "remi":
        grammar = _RemiGrammar(vocab, seq.scheme)
        keep = len(tokens)
        for i, row in enumerate(tokens):
            grammar.advance([int(row[0])])
            if not grammar.group:
                keep = i + 1
        tokens = tokens[:keep]

    piece = encoding.decode(
        TokenSequence(seq.scheme, tokens, vocab, seq.source_id)
    )
    if drop_trailing_measure and piece.notes:
        mlen = vocab.measure_length
        last_measure = piece.notes[-1].onset_tick // mlen
        kept = [n for n in piece.notes if n.onset_tick // mlen < last_measure]
        if kept:
            piece = Piece(
                notes=kept,
                time_signature=piece.time_signature,
                tempo_changes=[
                    (t, b) for t, b in piece.tempo_changes
                    if t < last_measure * mlen
                ],
                resolution=piece.resolution,
                source_id=piece.source_id,
            )
    return piece
