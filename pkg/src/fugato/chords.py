"""Rule-based chord detection on the beat grid.

One label per beat, found by matching the pitch-class profile of the
notes sounding in a two-beat window against 84 templates (12 roots x 7
qualities). Beats with fewer than two distinct pitch classes get the
no-chord label. The public function reports only the beats where the
label changes.
"""

from __future__ import annotations

from .errors import DataError
from .midi import Piece

NO_CHORD = "N"

QUALITY_TEMPLATES: dict[str, tuple[int, ...]] = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "dom7": (0, 4, 7, 10),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
}

QUALITIES = tuple(QUALITY_TEMPLATES)
ROOT_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

CHORD_SYMBOLS = tuple(f"{root}:{q}" for root in ROOT_NAMES for q in QUALITIES)

WINDOW_BEATS = 2


def pitch_class_weights(piece: Piece, beat: int) -> list[float]:
    """Sum of note counts per pitch class sounding in [beat, beat + 2) beats.

    Drums are excluded. A note "sounds" if its interval overlaps the window.
    """
    res = piece.resolution
    start = beat * res
    end = (beat + WINDOW_BEATS) * res
    weights = [0.0] * 12
    for note in piece.notes:
        if note.is_drum:
            continue
        if note.onset_tick < end and note.onset_tick + note.duration_ticks > start:
            weights[note.pitch % 12] += 1.0
    return weights


def score_template(weights: list[float], root: int, quality: str) -> float:
    """Template score: +weight for chord tones, -weight for others, +0.5 root bonus."""
    template = {(root + iv) % 12 for iv in QUALITY_TEMPLATES[quality]}
    score = 0.0
    for pc in range(12):
        score += weights[pc] if pc in template else -weights[pc]
    if weights[root] > 0:
        score += 0.5
    return score


def label_beat(weights: list[float]) -> str:
    """Best of the 84 templates, or NO_CHORD with fewer than 2 pitch classes.

    Ties break toward the lowest (root, quality) index, deterministically.
    """
    if sum(1 for w in weights if w > 0) < 2:
        return NO_CHORD
    best = None
    best_score = -float("inf")
    for root in range(12):
        for quality in QUALITIES:
            s = score_template(weights, root, quality)
            if s > best_score:
                best_score = s
                best = f"{ROOT_NAMES[root]}:{quality}"
    return best


def detect_chords(piece: Piece) -> list[tuple[int, str]]:
    """Label every beat of a quantized piece; emit (beat_tick, symbol) on changes.

    The first beat always emits. Returns an empty list for an empty piece.
    """
    if not piece.notes:
        return []
    if piece.time_signature is None:
        raise DataError("chord detection requires a time signature")
    res = piece.resolution
    last_note = piece.notes[-1]
    end_tick = max(n.onset_tick + n.duration_ticks for n in piece.notes)
    n_beats = (max(end_tick, last_note.onset_tick + 1) + res - 1) // res

    changes: list[tuple[int, str]] = []
    previous = None
    for beat in range(n_beats):
        label = label_beat(pitch_class_weights(piece, beat))
        if label != previous:
            changes.append((beat * res, label))
            previous = label
    return changes


def active_chords(piece: Piece) -> dict[int, str]:
    """Map from beat index to the chord active at that beat."""
    changes = detect_chords(piece)
    res = piece.resolution
    timeline: dict[int, str] = {}
    current = NO_CHORD
    idx = 0
    if not piece.notes:
        return timeline
    end_tick = max(n.onset_tick + n.duration_ticks for n in piece.notes)
    n_beats = (end_tick + res - 1) // res
    for beat in range(n_beats):
        while idx < len(changes) and changes[idx][0] <= beat * res:
            current = changes[idx][1]
            idx += 1
        timeline[beat] = current
    return timeline
