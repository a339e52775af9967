"""The four token encodings and their shared alignment machinery.

Schemes
-------
- ``nb-mf``: one compound token per note, state features first
  (metric, beat, chord, tempo, instrument, pitch, duration, velocity).
- ``nb-pf``: the same sub-token stream regrouped so each token leads with
  the previous note's (pitch, duration, velocity); one terminal token
  flushes the last note. A K-note piece yields K+1 tokens.
- ``cp``: interleaved families. Metric-family tokens carry
  (type, beat, chord, tempo) and appear at bars (beat = the bar marker)
  and wherever the playing position or an active chord/tempo changes;
  note-family tokens carry (type, instrument, pitch, duration, velocity).
- ``remi``: fully flattened single-integer tokens over one shared
  vocabulary; repeated state (same position, unchanged chord/tempo) is
  omitted.

The metric feature has four values: SSS (new time signature + measure +
beat: the first note), NSS (new measure + beat), NNS (new beat within the
measure), NNN (continues the previous grid position).

Empty interior measures are representable in remi/cp (consecutive bar
tokens) but not in nb, whose metric feature cannot count skipped
measures; nb encoders collapse such gaps and report them in
``clamp_counts``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import chords as chords_mod
from . import instruments
from .errors import ConfigError, DataError, DecodeError
from .midi import NoteEvent, Piece
from .vocab import (
    BAR,
    BOS,
    CONTINUE,
    IGNORE,
    PAD,
    FeatureVocab,
)

SCHEME_NAMES = ("remi", "cp", "nb-mf", "nb-pf")

# REMI note-group order; also the flattened order of nb state features.
STATE_FEATURES = ("beat", "chord", "tempo")
NOTE_FEATURES = ("instrument", "pitch", "duration", "velocity")


@dataclass(frozen=True)
class SchemeSpec:
    """Slot layout of one encoding: feature names and per-slot vocab sizes."""

    name: str
    features: tuple[str, ...]
    sizes: tuple[int, ...]

    @property
    def width(self) -> int:
        return len(self.features)


@dataclass
class TokenSequence:
    """An encoded piece: an integer array of shape [tokens, slots]."""

    scheme: SchemeSpec
    tokens: np.ndarray
    vocab: FeatureVocab
    source_id: str = ""
    clamp_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        if self.tokens.ndim != 2 or self.tokens.shape[1] != self.scheme.width:
            raise DataError(
                f"token array shape {self.tokens.shape} does not match "
                f"scheme {self.scheme.name} width {self.scheme.width}"
            )

    def __len__(self) -> int:
        return len(self.tokens)


class RemiVocab:
    """Shared flat vocabulary: all feature sub-vocabularies concatenated."""

    def __init__(self, vocab: FeatureVocab):
        self.entries: list[tuple[str, object]] = [("special", PAD), ("special", BOS)]
        self.entries.append(("bar", BAR))
        for name in ("beat",) + tuple(
            f for f in ("chord", "tempo") if getattr(vocab.config, f)
        ) + tuple(f for f in NOTE_FEATURES if _note_feature_active(vocab, f)):
            for value in vocab[name].values:
                self.entries.append((name, value))
        self._index = {entry: i for i, entry in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, feature: str, value) -> int:
        try:
            return self._index[(feature, value)]
        except KeyError:
            raise DataError(f"no REMI token for {feature}={value!r}") from None

    def entry(self, index: int) -> tuple[str, object]:
        return self.entries[index]

    def label(self, index: int) -> str:
        feature, value = self.entries[index]
        if feature == "special":
            return str(value)
        if feature == "bar":
            return "bar"
        return f"{feature}:{value}"


def _note_feature_active(vocab: FeatureVocab, name: str) -> bool:
    if name == "instrument":
        return vocab.config.instrument
    if name == "velocity":
        return vocab.config.velocity
    return True


def _remi_vocab(vocab: FeatureVocab) -> RemiVocab:
    cached = getattr(vocab, "_remi_vocab", None)
    if cached is None:
        cached = RemiVocab(vocab)
        vocab._remi_vocab = cached
    return cached


def scheme_for(name: str, vocab: FeatureVocab) -> SchemeSpec:
    """The slot layout of a named scheme under a vocabulary's feature config."""
    state = tuple(f for f in STATE_FEATURES if f == "beat" or getattr(vocab.config, f))
    note = tuple(f for f in NOTE_FEATURES if _note_feature_active(vocab, f))
    if name == "nb-mf":
        features = ("metric",) + state + note
    elif name == "nb-pf":
        leads = tuple(f for f in ("pitch", "duration", "velocity") if f in note)
        tail = ("instrument",) if "instrument" in note else ()
        features = leads + ("metric",) + state + tail
    elif name == "cp":
        features = ("type",) + state + note
    elif name == "remi":
        return SchemeSpec("remi", ("token",), (len(_remi_vocab(vocab)),))
    else:
        raise ConfigError(f"unknown scheme {name!r}")
    return SchemeSpec(name, features, tuple(vocab[f].size for f in features))


# ---------------------------------------------------------------------------
# Shared per-note event extraction


@dataclass
class _NoteCtx:
    note: NoteEvent
    measure: int
    position: int
    metric: str
    bars_crossed: int          # bar tokens REMI/CP emit before this note
    chord: str | None          # value when changed at this note's beat
    tempo: float | None


def _note_contexts(piece: Piece, vocab: FeatureVocab) -> list[_NoteCtx]:
    if not piece.notes:
        raise DataError(f"piece {piece.source_id!r} has no notes to encode")
    if piece.time_signature != vocab.time_signature:
        raise DataError(
            f"piece time signature {piece.time_signature} != vocab {vocab.time_signature}"
        )
    if piece.resolution != vocab.resolution:
        raise DataError(
            f"piece resolution {piece.resolution} != vocab {vocab.resolution}"
        )
    mlen = vocab.measure_length
    res = vocab.resolution

    chord_at = chords_mod.active_chords(piece) if vocab.config.chord else {}
    tempo_map = piece.tempo_changes

    def active_tempo(tick: int) -> float:
        bpm = tempo_map[0][1]
        for t, b in tempo_map:
            if t <= tick:
                bpm = b
            else:
                break
        return vocab.tempo_value(bpm)

    contexts: list[_NoteCtx] = []
    prev_measure = -1
    prev_position = None
    prev_chord = None
    prev_tempo = None
    for note in piece.notes:
        measure, position = divmod(note.onset_tick, mlen)
        if measure > prev_measure:
            metric = "SSS" if prev_position is None else "NSS"
            bars = measure - prev_measure
        elif position != prev_position:
            metric = "NNS"
            bars = 0
        else:
            metric = "NNN"
            bars = 0

        chord = None
        if vocab.config.chord:
            label = chord_at.get(note.onset_tick // res, chords_mod.NO_CHORD)
            if label != prev_chord:
                chord = label
                prev_chord = label
        tempo = None
        if vocab.config.tempo:
            bpm = active_tempo(note.onset_tick)
            if bpm != prev_tempo:
                tempo = bpm
                prev_tempo = bpm

        contexts.append(_NoteCtx(note, measure, position, metric, bars, chord, tempo))
        prev_measure, prev_position = measure, position
    return contexts


def _note_values(ctx: _NoteCtx, vocab: FeatureVocab, counts: dict[str, int]) -> dict:
    """Map one note's features to vocabulary values, clamping out-of-range ones."""
    values: dict[str, object] = {
        "metric": ctx.metric,
        "beat": ctx.position,
        "pitch": ctx.note.pitch,
    }
    duration = ctx.note.duration_ticks
    if duration > vocab.duration_cap:
        duration = vocab.duration_cap
        counts["duration_clamped"] = counts.get("duration_clamped", 0) + 1
    values["duration"] = duration
    if vocab.config.chord:
        values["chord"] = CONTINUE if ctx.chord is None else ctx.chord
    if vocab.config.tempo:
        values["tempo"] = CONTINUE if ctx.tempo is None else ctx.tempo
    if vocab.config.instrument:
        values["instrument"] = instruments.instrument_class(
            ctx.note.program, ctx.note.is_drum
        )
    if vocab.config.velocity:
        values["velocity"] = vocab.velocity_value(ctx.note.velocity)
    return values


# ---------------------------------------------------------------------------
# Encoders


def encode_nb(piece: Piece, vocab: FeatureVocab, order: str = "metric_first") -> TokenSequence:
    """Note-based encoding: exactly one compound token per note.

    ``order`` selects the grouping: "metric_first" keeps each note's
    features together; "pitch_first" shifts the grouping so (pitch,
    duration, velocity) of the previous note lead each token, plus one
    terminal token flushing the last note.
    """
    if order not in ("metric_first", "pitch_first"):
        raise ConfigError(f"unknown sub-token order {order!r}")
    scheme = scheme_for("nb-mf", vocab)
    contexts = _note_contexts(piece, vocab)
    counts: dict[str, int] = {}

    rows = []
    for ctx in contexts:
        skipped = max(0, ctx.bars_crossed - 1)
        if skipped > 0:
            counts["empty_measures_collapsed"] = (
                counts.get("empty_measures_collapsed", 0) + skipped
            )
        values = _note_values(ctx, vocab, counts)
        rows.append([vocab[f].index(values[f]) for f in scheme.features])
    tokens = np.array(rows, dtype=np.int32)

    if order == "metric_first":
        return TokenSequence(scheme, tokens, vocab, piece.source_id, counts)

    pf_scheme = scheme_for("nb-pf", vocab)
    return TokenSequence(
        pf_scheme, _regroup_pitch_first(tokens, scheme, pf_scheme, vocab),
        vocab, piece.source_id, counts,
    )


def _regroup_pitch_first(
    mf_tokens: np.ndarray, mf: SchemeSpec, pf: SchemeSpec, vocab: FeatureVocab
) -> np.ndarray:
    """Shift the compound grouping: token i of the result carries note i-1's
    note-target slots and note i's state slots; a terminal row flushes note K."""
    lead = [f for f in ("pitch", "duration", "velocity") if f in pf.features]
    k = len(mf_tokens)
    out = np.empty((k + 1, pf.width), dtype=np.int32)
    for j, name in enumerate(pf.features):
        ignore = vocab[name].index(IGNORE)
        col = mf_tokens[:, mf.features.index(name)]
        if name in lead:
            out[1:, j] = col
            out[0, j] = ignore
        else:
            out[:k, j] = col
            out[k, j] = ignore
    return out


_CP_EVENT_ORDER = {"bar": 0, "state": 1, "note": 2}


def encode_cp(piece: Piece, vocab: FeatureVocab) -> TokenSequence:
    """Interleaved-family encoding with explicit bar-marker tokens."""
    scheme = scheme_for("cp", vocab)
    contexts = _note_contexts(piece, vocab)
    counts: dict[str, int] = {}
    metric_idx = vocab["type"].index("metric")
    note_idx = vocab["type"].index("note")

    rows: list[list[int]] = []

    def emit(kind: str, values: dict) -> None:
        row = []
        for name in scheme.features:
            if name == "type":
                row.append(metric_idx if kind != "note" else note_idx)
            elif name in values:
                row.append(vocab[name].index(values[name]))
            else:
                row.append(vocab[name].index(IGNORE))
        rows.append(row)

    prev_position = None
    for ctx in contexts:
        values = _note_values(ctx, vocab, counts)
        for _ in range(ctx.bars_crossed):
            bar_values = {"beat": BAR}
            if vocab.config.chord:
                bar_values["chord"] = CONTINUE
            if vocab.config.tempo:
                bar_values["tempo"] = CONTINUE
            emit("bar", bar_values)
        if ctx.bars_crossed:
            prev_position = None

        changed = ctx.position != prev_position
        chord_new = values.get("chord", CONTINUE) != CONTINUE
        tempo_new = values.get("tempo", CONTINUE) != CONTINUE
        if changed or chord_new or tempo_new:
            state_values = {"beat": ctx.position}
            if vocab.config.chord:
                state_values["chord"] = values["chord"]
            if vocab.config.tempo:
                state_values["tempo"] = values["tempo"]
            emit("state", state_values)
            prev_position = ctx.position

        emit("note", {f: values[f] for f in NOTE_FEATURES if f in values})

    return TokenSequence(scheme, np.array(rows, dtype=np.int32), vocab,
                         piece.source_id, counts)


def encode_remi(piece: Piece, vocab: FeatureVocab) -> TokenSequence:
    """Flattened encoding over the shared integer vocabulary."""
    scheme = scheme_for("remi", vocab)
    rvocab = _remi_vocab(vocab)
    contexts = _note_contexts(piece, vocab)
    counts: dict[str, int] = {}

    flat: list[int] = []
    for ctx in contexts:
        values = _note_values(ctx, vocab, counts)
        flat.extend([rvocab.index("bar", BAR)] * ctx.bars_crossed)
        if ctx.metric != "NNN":
            flat.append(rvocab.index("beat", ctx.position))
        for name in ("chord", "tempo"):
            if name in values and values[name] != CONTINUE:
                flat.append(rvocab.index(name, values[name]))
        for name in NOTE_FEATURES:
            if name in values:
                flat.append(rvocab.index(name, values[name]))

    tokens = np.array(flat, dtype=np.int32).reshape(-1, 1)
    return TokenSequence(scheme, tokens, vocab, piece.source_id, counts)


def encode(piece: Piece, vocab: FeatureVocab, scheme: str) -> TokenSequence:
    """Encode under a scheme name: remi, cp, nb-mf, or nb-pf."""
    if scheme == "remi":
        return encode_remi(piece, vocab)
    if scheme == "cp":
        return encode_cp(piece, vocab)
    if scheme == "nb-mf":
        return encode_nb(piece, vocab, "metric_first")
    if scheme == "nb-pf":
        return encode_nb(piece, vocab, "pitch_first")
    raise ConfigError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Decoding


def _decode_note(values: dict, onset: int, vocab: FeatureVocab) -> NoteEvent:
    if vocab.config.instrument:
        is_drum, program = instruments.class_to_instrument(values["instrument"])
    else:
        is_drum, program = False, 0
    velocity = values["velocity"] if vocab.config.velocity else 64
    return NoteEvent(
        onset_tick=onset,
        is_drum=is_drum,
        program=program,
        pitch=values["pitch"],
        duration_ticks=values["duration"],
        velocity=velocity,
    )


class _PieceBuilder:
    """Accumulates decoded notes and state changes into a Piece."""

    def __init__(self, vocab: FeatureVocab, source_id: str):
        self.vocab = vocab
        self.source_id = source_id
        self.notes: list[NoteEvent] = []
        self.tempo_changes: list[tuple[int, float]] = []
        self.measure = -1
        self.position: int | None = None

    def new_measure(self, count: int = 1) -> None:
        self.measure += count
        self.position = None

    def set_position(self, value: int, pos: int) -> None:
        if self.position is not None and value < self.position:
            raise DecodeError(
                f"beat {value} moves backwards within measure {self.measure}", pos
            )
        self.position = value

    @property
    def onset(self) -> int:
        if self.measure < 0 or self.position is None:
            raise DecodeError("note emitted before any bar/beat")
        return self.measure * self.vocab.measure_length + self.position

    def set_tempo(self, bpm: float) -> None:
        beat_tick = (self.onset // self.vocab.resolution) * self.vocab.resolution
        if not self.tempo_changes:
            beat_tick = 0
        self.tempo_changes.append((beat_tick, bpm))

    def build(self) -> Piece:
        if not self.notes:
            raise DecodeError("sequence decodes to an empty piece")
        return Piece(
            notes=self.notes,
            time_signature=self.vocab.time_signature,
            tempo_changes=self.tempo_changes or [(0, 120.0)],
            resolution=self.vocab.resolution,
            source_id=self.source_id,
        )


def _decode_nb(seq: TokenSequence) -> Piece:
    vocab = seq.vocab
    scheme = seq.scheme
    builder = _PieceBuilder(vocab, seq.source_id)

    if scheme.name == "nb-pf":
        rows = _pitch_first_to_metric_first(seq)
    else:
        rows = [
            {f: vocab[f].value(int(idx)) for f, idx in zip(scheme.features, row)}
            for row in seq.tokens
        ]
    if not rows:
        raise DecodeError("sequence decodes to an empty piece")

    for pos, values in enumerate(rows):
        metric = values["metric"]
        if pos == 0 and metric != "SSS":
            raise DecodeError(f"first token has metric {metric}, expected SSS", pos)
        if metric in ("SSS", "NSS"):
            builder.new_measure()
            builder.set_position(values["beat"], pos)
        elif metric == "NNS":
            if values["beat"] == builder.position:
                raise DecodeError("NNS metric with unchanged beat", pos)
            builder.set_position(values["beat"], pos)
        else:
            if values["beat"] != builder.position:
                raise DecodeError(
                    f"NNN metric but beat {values['beat']} != current "
                    f"{builder.position}", pos,
                )
        if vocab.config.tempo and values.get("tempo") != CONTINUE:
            builder.set_tempo(values["tempo"])
        builder.notes.append(_decode_note(values, builder.onset, vocab))
    return builder.build()


def _pitch_first_to_metric_first(seq: TokenSequence) -> list[dict]:
    """Reassemble per-note value dicts from the shifted grouping."""
    vocab = seq.vocab
    pf = seq.scheme
    lead = [f for f in ("pitch", "duration", "velocity") if f in pf.features]
    state = [f for f in pf.features if f not in lead]
    if len(seq.tokens) < 2:
        raise DecodeError("pitch-first sequence needs at least 2 tokens (note + flush)")

    rows: list[dict] = []
    for i in range(len(seq.tokens) - 1):
        values = {}
        for f in state:
            values[f] = vocab[f].value(int(seq.tokens[i, pf.features.index(f)]))
        for f in lead:
            values[f] = vocab[f].value(int(seq.tokens[i + 1, pf.features.index(f)]))
        for f, v in values.items():
            if v == IGNORE:
                raise DecodeError(f"unexpected ignore in slot {f} of note {i}", i)
        rows.append(values)
    terminal = seq.tokens[-1]
    for f in state:
        if vocab[f].value(int(terminal[pf.features.index(f)])) != IGNORE:
            raise DecodeError("terminal token carries non-ignore state slots",
                              len(seq.tokens) - 1)
    return rows


def _decode_cp(seq: TokenSequence) -> Piece:
    vocab = seq.vocab
    scheme = seq.scheme
    builder = _PieceBuilder(vocab, seq.source_id)

    for pos, row in enumerate(seq.tokens):
        values = {f: vocab[f].value(int(i)) for f, i in zip(scheme.features, row)}
        if values["type"] == "metric":
            if values["beat"] == BAR:
                builder.new_measure()
                continue
            if builder.measure < 0:
                raise DecodeError("state token before the first bar", pos)
            if values["beat"] == IGNORE:
                raise DecodeError("metric-family token without a beat", pos)
            if values["beat"] != builder.position:
                builder.set_position(values["beat"], pos)
            if vocab.config.tempo and values.get("tempo") not in (CONTINUE, IGNORE):
                builder.set_tempo(values["tempo"])
        else:
            note_values = {f: values[f] for f in NOTE_FEATURES if f in values}
            if any(v == IGNORE for v in note_values.values()):
                raise DecodeError("note-family token with ignored note slots", pos)
            if builder.position is None:
                raise DecodeError("note before any beat position", pos)
            builder.notes.append(_decode_note(note_values, builder.onset, vocab))
    return builder.build()


def _decode_remi(seq: TokenSequence) -> Piece:
    vocab = seq.vocab
    rvocab = _remi_vocab(vocab)
    builder = _PieceBuilder(vocab, seq.source_id)
    note_order = [f for f in NOTE_FEATURES if _note_feature_active(vocab, f)]

    pending: dict[str, object] = {}
    for pos in range(len(seq.tokens)):
        feature, value = rvocab.entry(int(seq.tokens[pos, 0]))
        if feature in note_order:
            expected = note_order[len(pending)]
            if feature != expected:
                raise DecodeError(f"expected {expected} token, got {feature}", pos)
            if builder.position is None:
                raise DecodeError(f"{feature} token before any beat", pos)
            pending[feature] = value
            if len(pending) == len(note_order):
                builder.notes.append(_decode_note(pending, builder.onset, vocab))
                pending = {}
            continue
        if pending:
            raise DecodeError(f"incomplete note group before {feature} token", pos)
        if feature == "special":
            raise DecodeError(f"unexpected {value} token", pos)
        if feature == "bar":
            builder.new_measure()
        elif feature == "beat":
            if builder.measure < 0:
                raise DecodeError("beat before any bar", pos)
            if value == builder.position:
                raise DecodeError(f"repeated beat {value}", pos)
            builder.set_position(value, pos)
        else:
            if builder.position is None:
                raise DecodeError(f"{feature} token before any beat", pos)
            if feature == "tempo":
                builder.set_tempo(value)
    if pending:
        raise DecodeError("sequence ends mid note group", len(seq.tokens) - 1)
    return builder.build()


def decode(seq: TokenSequence) -> Piece:
    """Reconstruct the quantized piece; inverse of the encoders."""
    if len(seq.tokens) == 0:
        raise DecodeError("cannot decode an empty sequence")
    if seq.scheme.name in ("nb-mf", "nb-pf"):
        return _decode_nb(seq)
    if seq.scheme.name == "cp":
        return _decode_cp(seq)
    if seq.scheme.name == "remi":
        return _decode_remi(seq)
    raise ConfigError(f"cannot decode scheme {seq.scheme.name!r}")


# ---------------------------------------------------------------------------
# Flattening and REMI alignment


@dataclass(frozen=True)
class SlotValue:
    token_index: int
    slot_index: int
    feature: str
    value: object


def flatten(seq: TokenSequence, drop_ignore: bool = False) -> list[SlotValue]:
    """Sub-token stream in slot order; optionally without ignore slots."""
    out = []
    if seq.scheme.name == "remi":
        rvocab = _remi_vocab(seq.vocab)
        for t, row in enumerate(seq.tokens):
            feature, value = rvocab.entry(int(row[0]))
            out.append(SlotValue(t, 0, feature, value))
        return out
    for t, row in enumerate(seq.tokens):
        for s, name in enumerate(seq.scheme.features):
            value = seq.vocab[name].value(int(row[s]))
            if drop_ignore and value == IGNORE:
                continue
            out.append(SlotValue(t, s, name, value))
    return out


@dataclass(frozen=True)
class AlignmentEntry:
    token_index: int
    slot_index: int
    feature: str           # the compound slot's feature
    matched: bool
    remi_index: int | None
    remi_feature: str | None


@dataclass
class RemiAlignment:
    """Per-sub-token match/omit decisions against the piece's REMI stream."""

    entries: list[AlignmentEntry]

    @property
    def matched_count(self) -> int:
        return sum(1 for e in self.entries if e.matched)


def align_to_remi(seq: TokenSequence) -> RemiAlignment:
    """Mark every sub-token as matched to a REMI token or omitted.

    Omitted sub-tokens are exactly the unchanged-state ones (metric NNS or
    NNN carrying no bar, value-repeating beats, chord/tempo continues),
    the ignore slots, and cp's family-type markers, whose information REMI
    encodes implicitly. Matched sub-tokens appear in REMI stream order.
    """
    if seq.scheme.name == "remi":
        entries = [
            AlignmentEntry(t, 0, _remi_vocab(seq.vocab).entry(int(v))[0], True, t,
                           _remi_vocab(seq.vocab).entry(int(v))[0])
            for t, v in enumerate(seq.tokens[:, 0])
        ]
        return RemiAlignment(entries)
    if seq.scheme.name not in ("nb-mf", "nb-pf", "cp"):
        raise ConfigError(f"cannot align scheme {seq.scheme.name!r}")

    entries: list[AlignmentEntry] = []
    remi_pos = 0
    # nb: the note's metric value decides whether its beat slot matches.
    last_metric = None
    # cp: track the current position; bars reset it.
    cp_position: object = None

    def emit(sv: SlotValue, matched: bool, remi_feature: str | None = None):
        nonlocal remi_pos
        if matched:
            entries.append(
                AlignmentEntry(sv.token_index, sv.slot_index, sv.feature, True,
                               remi_pos, remi_feature or sv.feature)
            )
            remi_pos += 1
        else:
            entries.append(
                AlignmentEntry(sv.token_index, sv.slot_index, sv.feature, False,
                               None, None)
            )

    for sv in flatten(seq):
        if sv.value == IGNORE:
            emit(sv, False)
        elif sv.feature == "type":
            emit(sv, False)
        elif sv.feature == "metric":
            last_metric = sv.value
            emit(sv, sv.value in ("SSS", "NSS"), "bar")
        elif sv.feature == "beat":
            if seq.scheme.name == "cp":
                if sv.value == BAR:
                    cp_position = None
                    emit(sv, True, "bar")
                else:
                    emit(sv, sv.value != cp_position)
                    cp_position = sv.value
            else:
                emit(sv, last_metric != "NNN")
        elif sv.feature in ("chord", "tempo"):
            emit(sv, sv.value != CONTINUE)
        else:
            emit(sv, True)
    return RemiAlignment(entries)


def verify_alignment(seq: TokenSequence, remi_seq: TokenSequence) -> RemiAlignment:
    """Internal consistency hook: matched sub-tokens must reproduce the
    actual REMI stream one-for-one. Raises DataError on any mismatch."""
    alignment = align_to_remi(seq)
    rvocab = _remi_vocab(seq.vocab)
    matched = [e for e in alignment.entries if e.matched]
    if len(matched) != len(remi_seq.tokens):
        raise DataError(
            f"alignment matched {len(matched)} sub-tokens but the REMI "
            f"stream has {len(remi_seq.tokens)} tokens"
        )
    values = flatten(seq)
    by_pos = {(sv.token_index, sv.slot_index): sv for sv in values}
    for entry in matched:
        feature, value = rvocab.entry(int(remi_seq.tokens[entry.remi_index, 0]))
        if feature != entry.remi_feature:
            raise DataError(
                f"sub-token {entry} aligned to REMI feature {feature!r}"
            )
        if feature != "bar":
            sv = by_pos[(entry.token_index, entry.slot_index)]
            if sv.value != value:
                raise DataError(
                    f"sub-token value {sv.value!r} != REMI value {value!r} "
                    f"at REMI position {entry.remi_index}"
                )
    return alignment


# ---------------------------------------------------------------------------
# Debug dump and prompt cutting


def dump_tokens(seq: TokenSequence) -> str:
    """Debugging format: one line per token, pipe-separated name=value pairs."""
    lines = []
    if seq.scheme.name == "remi":
        rvocab = _remi_vocab(seq.vocab)
        for row in seq.tokens:
            lines.append(rvocab.label(int(row[0])))
    else:
        for row in seq.tokens:
            parts = [
                f"{name}={seq.vocab[name].value(int(idx))}"
                for name, idx in zip(seq.scheme.features, row)
            ]
            lines.append("|".join(parts))
    return "\n".join(lines) + "\n"


def prompt_cut_index(seq: TokenSequence, measures: int) -> int:
    """Token index ending the prefix that covers the first ``measures`` measures."""
    if measures < 1:
        raise ConfigError(f"measures must be >= 1, got {measures}")
    vocab = seq.vocab
    if seq.scheme.name == "remi":
        rvocab = _remi_vocab(vocab)
        bars = 0
        for i, row in enumerate(seq.tokens):
            if rvocab.entry(int(row[0]))[0] == "bar":
                bars += 1
                if bars > measures:
                    return i
        raise DataError(f"piece has fewer than {measures} complete measures")
    if seq.scheme.name == "cp":
        bars = 0
        beat_slot = seq.scheme.features.index("beat")
        for i, row in enumerate(seq.tokens):
            if vocab["beat"].value(int(row[beat_slot])) == BAR:
                bars += 1
                if bars > measures:
                    return i
        raise DataError(f"piece has fewer than {measures} complete measures")
    # nb: count measure starts via the metric slot
    metric_slot = seq.scheme.features.index("metric")
    measure = -1
    for i, row in enumerate(seq.tokens):
        value = vocab["metric"].value(int(row[metric_slot]))
        if value in ("SSS", "NSS"):
            measure += 1
            if measure >= measures:
                return i
    raise DataError(f"piece has fewer than {measures} complete measures")
