"""Standard MIDI File ingestion and emission.

Parses type-0/type-1 SMF byte streams into quantized multi-instrument
pieces, filters and splits corpora, applies pitch augmentation, and writes
pieces back to MIDI.

Time units: a freshly parsed ``Piece`` keeps onsets/durations in raw SMF
ticks, with ``resolution`` holding the tick count of one time-signature
beat (the denominator unit). ``quantize`` converts to a coarse grid of
``resolution`` units per beat; after that, onsets and durations are small
integers on that grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, MidiParseError

DEFAULT_TEMPO_BPM = 120.0
DRUM_CHANNEL = 9


@dataclass(frozen=True, order=True)
class NoteEvent:
    """One note: onset and duration on the piece's time grid.

    ``program`` is the General MIDI program id (0-127); drum-channel notes
    carry ``is_drum`` and keep ``pitch`` as the percussion key.
    """

    onset_tick: int
    is_drum: bool
    program: int
    pitch: int
    duration_ticks: int
    velocity: int

    def __post_init__(self):
        if self.onset_tick < 0:
            raise DataError(f"negative onset {self.onset_tick}")
        if self.duration_ticks < 1:
            raise DataError(f"non-positive duration {self.duration_ticks}")
        if not 0 <= self.pitch <= 127:
            raise DataError(f"pitch {self.pitch} outside 0..127")
        if not 1 <= self.velocity <= 127:
            raise DataError(f"velocity {self.velocity} outside 1..127")
        if not 0 <= self.program <= 127:
            raise DataError(f"program {self.program} outside 0..127")

    @property
    def instrument(self) -> tuple[bool, int]:
        """Identity used for channel assignment and sorting: (is_drum, program)."""
        return (self.is_drum, self.program)


@dataclass
class Piece:
    """A quantized multi-instrument score.

    ``notes`` are kept sorted by (onset, instrument, pitch, duration,
    velocity); ``tempo_changes`` is a sorted list of (tick, bpm) change
    points; ``resolution`` is the number of grid units per time-signature
    beat. Pieces carry exactly one time signature (or none before
    filtering).
    """

    notes: list[NoteEvent]
    time_signature: tuple[int, int] | None
    tempo_changes: list[tuple[int, float]]
    resolution: int
    source_id: str = ""
    warnings: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.notes = sorted(self.notes)
        self.tempo_changes = _normalize_tempo_map(self.tempo_changes)

    @property
    def measure_length(self) -> int:
        """Measure length in grid units (numerator beats of `resolution` units)."""
        if self.time_signature is None:
            raise DataError(f"piece {self.source_id!r} has no time signature")
        return self.time_signature[0] * self.resolution

    @property
    def instruments(self) -> list[tuple[bool, int]]:
        return sorted({n.instrument for n in self.notes})

    def same_music(self, other: "Piece") -> bool:
        """Musical-content equality: note multiset, tempo map, time signature,
        resolution. Ignores source_id and warnings."""
        return (
            self.notes == other.notes
            and self.time_signature == other.time_signature
            and self.resolution == other.resolution
            and len(self.tempo_changes) == len(other.tempo_changes)
            and all(
                ta == tb and ba == bb
                for (ta, ba), (tb, bb) in zip(self.tempo_changes, other.tempo_changes)
            )
        )


@dataclass(frozen=True)
class CorpusSplit:
    """Disjoint train/valid/test partition of piece ids."""

    train: list[str]
    valid: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"train": self.train, "valid": self.valid, "test": self.test, "seed": self.seed},
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "CorpusSplit":
        obj = json.loads(text)
        return CorpusSplit(obj["train"], obj["valid"], obj["test"], obj["seed"])


def _normalize_tempo_map(changes: list[tuple[int, float]]) -> list[tuple[int, float]]:
    """Sort, keep the last event per tick, and drop no-op repeats."""
    by_tick: dict[int, float] = {}
    for tick, bpm in sorted(changes, key=lambda c: c[0]):
        by_tick[int(tick)] = float(bpm)
    out: list[tuple[int, float]] = []
    for tick in sorted(by_tick):
        bpm = by_tick[tick]
        if not out or out[-1][1] != bpm:
            out.append((tick, bpm))
    return out


# ---------------------------------------------------------------------------
# SMF parsing


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _parse_track(
    data: bytes, start: int, end: int, state: "_ParseState"
) -> None:
    """Walk one MTrk chunk, accumulating note/meta events with absolute ticks."""
    pos = start
    tick = 0
    running_status = None
    # (channel, pitch) -> FIFO of (onset_tick, velocity, program)
    active: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    program = dict(state.channel_program)

    while pos < end:
        delta, pos = _read_varlen(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("event status missing at track end", pos)
        status = data[pos]
        if status & 0x80:
            pos += 1
            if status < 0xF0:
                running_status = status
        else:
            if running_status is None:
                raise MidiParseError("data byte without running status", pos)
            status = running_status

        if status == 0xFF:
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            pos += 1
            length, pos = _read_varlen(data, pos)
            payload = data[pos : pos + length]
            if len(payload) < length:
                raise MidiParseError("truncated meta payload", pos)
            pos += length
            if meta_type == 0x51 and length == 3:
                mpqn = int.from_bytes(payload, "big")
                if mpqn > 0:
                    state.tempos.append((tick, 60_000_000.0 / mpqn))
            elif meta_type == 0x58 and length >= 2:
                sig = (payload[0], 1 << payload[1])
                if state.time_signature is None:
                    state.time_signature = sig
                elif state.time_signature != sig:
                    raise DataError(
                        f"time-signature change {state.time_signature} -> {sig} not supported"
                    )
            elif meta_type == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos)
            pos += length
            if pos > end:
                raise MidiParseError("truncated sysex event", pos)
        else:
            kind = status & 0xF0
            channel = status & 0x0F
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            if pos + n_data > end:
                raise MidiParseError("truncated channel event", pos)
            d1 = data[pos]
            d2 = data[pos + 1] if n_data == 2 else 0
            pos += n_data

            if kind == 0xC0:
                program[channel] = d1
            elif kind == 0x90 and d2 > 0:
                active.setdefault((channel, d1), []).append((tick, d2, program[channel]))
            elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                queue = active.get((channel, d1))
                if queue:
                    onset, vel, prog = queue.pop(0)
                    state.emit_note(channel, d1, onset, tick, vel, prog)
                else:
                    state.warnings["unmatched_note_off"] = (
                        state.warnings.get("unmatched_note_off", 0) + 1
                    )

    # notes still sounding are closed at track end
    for (channel, pitch), queue in active.items():
        for onset, vel, prog in queue:
            state.emit_note(channel, pitch, onset, tick, vel, prog)
            state.warnings["note_on_without_off"] = (
                state.warnings.get("note_on_without_off", 0) + 1
            )


class _ParseState:
    def __init__(self):
        self.notes: list[NoteEvent] = []
        self.tempos: list[tuple[int, float]] = []
        self.time_signature: tuple[int, int] | None = None
        self.warnings: dict[str, int] = {}
        self.channel_program = {ch: 0 for ch in range(16)}

    def emit_note(self, channel, pitch, onset, off_tick, velocity, program):
        duration = max(1, off_tick - onset)
        self.notes.append(
            NoteEvent(
                onset_tick=onset,
                is_drum=channel == DRUM_CHANNEL,
                program=program,
                pitch=pitch,
                duration_ticks=duration,
                velocity=max(1, velocity),
            )
        )


def parse_midi(data: bytes, source_id: str = "") -> Piece:
    """Parse a type-0 or type-1 Standard MIDI File.

    Returns a tick-accurate ``Piece``: all note-on/note-off pairs become
    NoteEvents, tempo and time-signature meta events are captured, and
    channel-10 notes are flagged as drums. Unmatched note-ons are closed at
    track end and counted in ``piece.warnings``.

    Raises MidiParseError (with a byte offset) on malformed input and
    DataError on unsupported content (SMPTE timing, time-signature change).
    """
    if len(data) < 14:
        raise MidiParseError("byte stream shorter than an SMF header", 0)
    if data[0:4] != b"MThd":
        raise MidiParseError("missing MThd magic", 0)
    header_len = int.from_bytes(data[4:8], "big")
    if header_len < 6:
        raise MidiParseError(f"header length {header_len} < 6", 4)
    fmt = int.from_bytes(data[8:10], "big")
    n_tracks = int.from_bytes(data[10:12], "big")
    division = int.from_bytes(data[12:14], "big")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    ticks_per_quarter = division & 0x7FFF
    if ticks_per_quarter == 0:
        raise MidiParseError("zero ticks per quarter note", 12)

    state = _ParseState()
    pos = 8 + header_len
    tracks_seen = 0
    while tracks_seen < n_tracks:
        if pos + 8 > len(data):
            raise MidiParseError(
                f"expected {n_tracks} tracks, found {tracks_seen}", pos
            )
        if data[pos : pos + 4] != b"MTrk":
            raise MidiParseError("missing MTrk magic", pos)
        track_len = int.from_bytes(data[pos + 4 : pos + 8], "big")
        start = pos + 8
        end = start + track_len
        if end > len(data):
            raise MidiParseError("track extends past end of file", pos + 4)
        _parse_track(data, start, end, state)
        pos = end
        tracks_seen += 1

    if state.time_signature is not None:
        numerator, denominator = state.time_signature
        beat_ticks = ticks_per_quarter * 4 / denominator
        if beat_ticks != int(beat_ticks):
            raise DataError(
                f"ticks per {denominator}-denominator beat is fractional ({beat_ticks})"
            )
        resolution = int(beat_ticks)
    else:
        resolution = ticks_per_quarter

    tempos = state.tempos or [(0, DEFAULT_TEMPO_BPM)]
    if tempos[0][0] != 0:
        tempos = [(0, DEFAULT_TEMPO_BPM)] + tempos

    return Piece(
        notes=state.notes,
        time_signature=state.time_signature,
        tempo_changes=tempos,
        resolution=resolution,
        source_id=source_id,
        warnings=state.warnings,
    )


# ---------------------------------------------------------------------------
# Quantization / augmentation / filtering / splitting


def _snap(value: float) -> int:
    """Round half up, deterministically (no banker's rounding)."""
    return math.floor(value + 0.5)


def quantize(piece: Piece, resolution: int) -> Piece:
    """Snap onsets and durations to a grid of ``resolution`` units per beat.

    Durations are clamped to at least one grid unit, and notes made
    identical by snapping (same onset, pitch, instrument) are merged
    keeping the longest duration. Idempotent at a fixed resolution.
    """
    if resolution <= 0:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    scale = resolution / piece.resolution

    snapped: dict[tuple[int, bool, int, int], NoteEvent] = {}
    for note in piece.notes:
        onset = _snap(note.onset_tick * scale)
        duration = max(1, _snap(note.duration_ticks * scale))
        key = (onset, note.is_drum, note.program, note.pitch)
        merged = snapped.get(key)
        if merged is None or (duration, note.velocity) > (
            merged.duration_ticks,
            merged.velocity,
        ):
            snapped[key] = NoteEvent(
                onset_tick=onset,
                is_drum=note.is_drum,
                program=note.program,
                pitch=note.pitch,
                duration_ticks=duration,
                velocity=note.velocity,
            )

    tempos = [(_snap(tick * scale), bpm) for tick, bpm in piece.tempo_changes]
    return Piece(
        notes=list(snapped.values()),
        time_signature=piece.time_signature,
        tempo_changes=tempos,
        resolution=resolution,
        source_id=piece.source_id,
        warnings=dict(piece.warnings),
    )


def augment_pitch(piece: Piece, shift: int) -> Piece:
    """Shift every non-drum pitch by ``shift`` semitones.

    Shifts are restricted to the training range [-5, 6]. Pitches leaving
    0..127 are pulled back by whole octaves until in range, preserving the
    note count. Drum notes are never shifted.
    """
    if not -5 <= shift <= 6:
        raise ConfigError(f"pitch shift {shift} outside [-5, 6]")
    if shift == 0:
        return piece
    notes = []
    for note in piece.notes:
        if note.is_drum:
            notes.append(note)
            continue
        pitch = note.pitch + shift
        while pitch > 127:
            pitch -= 12
        while pitch < 0:
            pitch += 12
        notes.append(replace(note, pitch=pitch))
    return Piece(
        notes=notes,
        time_signature=piece.time_signature,
        tempo_changes=list(piece.tempo_changes),
        resolution=piece.resolution,
        source_id=piece.source_id,
        warnings=dict(piece.warnings),
    )


@dataclass(frozen=True)
class FilterCriteria:
    """Corpus filter thresholds; None disables a criterion.

    ``max_tempo_changes`` and ``beat_aligned_tempo`` implement the
    expressive-tempo rejection proxy: pieces with many tempo events or
    tempo events off the beat grid are dropped.
    """

    require_time_signature: bool = True
    min_notes: int | None = 64
    max_notes: int | None = 20000
    min_instruments: int | None = None
    max_tempo_changes: int | None = 8
    beat_aligned_tempo: bool = True

    def __post_init__(self):
        for name in ("min_notes", "max_notes", "min_instruments", "max_tempo_changes"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be nonnegative, got {value}")


@dataclass
class FilterResult:
    pieces: list[Piece]
    rejections: dict[str, int]


def filter_corpus(pieces: list[Piece], criteria: FilterCriteria) -> FilterResult:
    """Keep pieces passing every criterion, preserving order.

    Returns the surviving subsequence plus per-criterion rejection counts
    (a piece is charged to the first criterion it fails).
    """
    kept: list[Piece] = []
    rejections: dict[str, int] = {}

    def reject(reason: str) -> None:
        rejections[reason] = rejections.get(reason, 0) + 1

    for piece in pieces:
        if criteria.require_time_signature and piece.time_signature is None:
            reject("no_time_signature")
            continue
        n = len(piece.notes)
        if criteria.min_notes is not None and n < criteria.min_notes:
            reject("too_few_notes")
            continue
        if criteria.max_notes is not None and n > criteria.max_notes:
            reject("too_many_notes")
            continue
        if (
            criteria.min_instruments is not None
            and len(piece.instruments) < criteria.min_instruments
        ):
            reject("too_few_instruments")
            continue
        if (
            criteria.max_tempo_changes is not None
            and len(piece.tempo_changes) > criteria.max_tempo_changes
        ):
            reject("expressive_tempo")
            continue
        if criteria.beat_aligned_tempo and any(
            tick % piece.resolution != 0 for tick, _ in piece.tempo_changes
        ):
            reject("off_beat_tempo")
            continue
        kept.append(piece)
    return FilterResult(kept, rejections)


def split_corpus(pieces: list[Piece], seed: int) -> CorpusSplit:
    """Deterministic 80/10/10 split by piece id.

    Validation and test each receive floor(10%) of the pieces; the
    remainder goes to train. Requires at least 10 pieces.
    """
    if len(pieces) < 10:
        raise ConfigError(f"need at least 10 pieces to split, got {len(pieces)}")
    ids = [p.source_id for p in pieces]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate source ids in corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_hold = len(ids) // 10
    return CorpusSplit(
        train=sorted(shuffled[2 * n_hold :]),
        valid=sorted(shuffled[:n_hold]),
        test=sorted(shuffled[n_hold : 2 * n_hold]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# SMF writing


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(events: list[tuple[int, bytes]]) -> bytes:
    """Assemble an MTrk from (tick, payload) events, sorted with note-offs
    before note-ons at equal ticks so zero-gap repeats re-trigger."""

    def order(item):
        tick, payload = item
        status = payload[0] & 0xF0
        rank = 0 if status == 0x80 else (2 if status == 0x90 else 1)
        return (tick, rank, payload)

    body = bytearray()
    last = 0
    for tick, payload in sorted(events, key=order):
        body += _varlen(tick - last)
        body += payload
        last = tick
    body += _varlen(0) + bytes([0xFF, 0x2F, 0x00])
    return b"MTrk" + len(body).to_bytes(4, "big") + bytes(body)


def write_midi(piece: Piece) -> bytes:
    """Serialize a quantized piece as a type-1 SMF byte stream.

    Each instrument gets its own track and channel (drums on channel 10);
    track 0 carries the time signature and tempo map. Round trip holds:
    parsing the result and quantizing at ``piece.resolution`` reproduces
    the piece's note multiset, tempo map, and time signature.
    """
    if not piece.notes:
        raise DataError("cannot write a piece with zero notes")
    if piece.time_signature is None:
        raise DataError("cannot write a piece without a time signature")
    numerator, denominator = piece.time_signature

    # choose ticks/quarter so one grid unit is an integer number of ticks
    if (piece.resolution * denominator) % 4 == 0:
        ticks_per_quarter = piece.resolution * denominator // 4
        tick_scale = 1
    else:
        ticks_per_quarter = piece.resolution * denominator
        tick_scale = 4

    pitched = [inst for inst in piece.instruments if not inst[0]]
    has_drums = any(inst[0] for inst in piece.instruments)
    free_channels = [ch for ch in range(16) if ch != DRUM_CHANNEL]
    if len(pitched) > len(free_channels):
        raise DataError(
            f"{len(pitched)} pitched instruments exceed the {len(free_channels)} available channels"
        )
    channel_of: dict[tuple[bool, int], int] = {
        inst: free_channels[i] for i, inst in enumerate(pitched)
    }
    if has_drums:
        for inst in piece.instruments:
            if inst[0]:
                channel_of[inst] = DRUM_CHANNEL

    conductor: list[tuple[int, bytes]] = []
    log_dd = denominator.bit_length() - 1
    conductor.append((0, bytes([0xFF, 0x58, 0x04, numerator, log_dd, 24, 8])))
    for tick, bpm in piece.tempo_changes:
        mpqn = max(1, round(60_000_000.0 / bpm))
        conductor.append(
            (tick * tick_scale, bytes([0xFF, 0x51, 0x03]) + mpqn.to_bytes(3, "big"))
        )

    tracks = [_track_chunk(conductor)]
    for inst in piece.instruments:
        channel = channel_of[inst]
        # overlapping same-pitch notes go to separate voice tracks so that
        # per-track FIFO note-off pairing stays unambiguous on re-parse
        voices: list[list[NoteEvent]] = []
        voice_pitch_end: list[dict[int, int]] = []
        for note in piece.notes:
            if note.instrument != inst:
                continue
            end = note.onset_tick + note.duration_ticks
            for voice, ends in zip(voices, voice_pitch_end):
                if ends.get(note.pitch, 0) <= note.onset_tick:
                    voice.append(note)
                    ends[note.pitch] = end
                    break
            else:
                voices.append([note])
                voice_pitch_end.append({note.pitch: end})
        for voice in voices:
            events: list[tuple[int, bytes]] = []
            if not inst[0]:
                events.append((0, bytes([0xC0 | channel, inst[1]])))
            for note in voice:
                on = note.onset_tick * tick_scale
                off = (note.onset_tick + note.duration_ticks) * tick_scale
                events.append((on, bytes([0x90 | channel, note.pitch, note.velocity])))
                events.append((off, bytes([0x80 | channel, note.pitch, 0])))
            tracks.append(_track_chunk(events))

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (1).to_bytes(2, "big")
    header += len(tracks).to_bytes(2, "big")
    header += ticks_per_quarter.to_bytes(2, "big")
    return header + b"".join(tracks)


# ---------------------------------------------------------------------------
# Corpus persistence (JSON piece files + manifest)


def piece_to_dict(piece: Piece) -> dict:
    return {
        "source_id": piece.source_id,
        "time_signature": list(piece.time_signature) if piece.time_signature else None,
        "resolution": piece.resolution,
        "tempo_changes": [[t, b] for t, b in piece.tempo_changes],
        "notes": [
            [n.onset_tick, int(n.is_drum), n.program, n.pitch, n.duration_ticks, n.velocity]
            for n in piece.notes
        ],
    }


def piece_from_dict(obj: dict) -> Piece:
    return Piece(
        notes=[
            NoteEvent(
                onset_tick=o, is_drum=bool(d), program=pr, pitch=p,
                duration_ticks=du, velocity=v,
            )
            for o, d, pr, p, du, v in obj["notes"]
        ],
        time_signature=tuple(obj["time_signature"]) if obj["time_signature"] else None,
        tempo_changes=[(int(t), float(b)) for t, b in obj["tempo_changes"]],
        resolution=obj["resolution"],
        source_id=obj.get("source_id", ""),
    )


def save_corpus(pieces: list[Piece], directory: str | Path) -> Path:
    """Write one JSON file per piece plus a manifest.jsonl; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as manifest:
        for piece in pieces:
            path = directory / f"{piece.source_id}.json"
            path.write_text(json.dumps(piece_to_dict(piece)), encoding="utf-8")
            entry = {
                "source_id": piece.source_id,
                "path": path.name,
                "note_count": len(piece.notes),
                "instruments": [[int(d), p] for d, p in piece.instruments],
                "time_signature": list(piece.time_signature)
                if piece.time_signature
                else None,
            }
            manifest.write(json.dumps(entry) + "\n")
    return manifest_path


def load_corpus(directory: str | Path) -> list[Piece]:
    """Load every piece listed in a directory's manifest.jsonl, in manifest order."""
    directory = Path(directory)
    manifest_path = directory / "manifest.jsonl"
    if not manifest_path.exists():
        raise DataError(f"no manifest.jsonl under {directory}")
    pieces = []
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        entry = json.loads(line)
        obj = json.loads((directory / entry["path"]).read_text(encoding="utf-8"))
        pieces.append(piece_from_dict(obj))
    return pieces
