import numpy as np

from fugato import chords, synthetic
from fugato.chords import (
    NO_CHORD,
    QUALITIES,
    QUALITY_TEMPLATES,
    ROOT_NAMES,
    detect_chords,
    label_beat,
    pitch_class_weights,
)
from fugato.midi import NoteEvent, Piece


def piece_of(notes, resolution=4):
    return Piece(notes=notes, time_signature=(4, 4),
                 tempo_changes=[(0, 120.0)], resolution=resolution,
                 source_id="chords")


def brute_force_label(weights):
    """Independent exhaustive scorer over all 84 templates."""
    if sum(1 for w in weights if w > 0) < 2:
        return NO_CHORD
    scored = []
    for root in range(12):
        for quality in QUALITIES:
            template = {(root + off) % 12 for off in QUALITY_TEMPLATES[quality]}
            total = 0.0
            for pc in range(12):
                total += weights[pc] if pc in template else -weights[pc]
            if weights[root] > 0:
                total += 0.5
            scored.append((total, f"{ROOT_NAMES[root]}:{quality}"))
    best = max(total for total, _ in scored)
    # ties resolve to the first (lowest root, then quality order) entry
    for total, name in scored:
        if total == best:
            return name
    raise AssertionError


def test_exact_major_triad():
    notes = [NoteEvent(0, False, 0, p, 4, 64) for p in (60, 64, 67)]
    changes = detect_chords(piece_of(notes))
    assert changes[0] == (0, "C:maj")


def test_single_melody_line_has_no_chords():
    notes = [NoteEvent(i * 4, False, 0, 60, 4, 64) for i in range(4)]
    changes = detect_chords(piece_of(notes))
    assert changes == [(0, NO_CHORD)]


def test_seventh_chord_detected():
    notes = [NoteEvent(0, False, 0, p, 8, 64) for p in (62, 65, 69, 72)]
    changes = detect_chords(piece_of(notes))
    assert changes[0] == (0, "D:min7")


def test_changes_only_emitted_on_difference():
    notes = [NoteEvent(t, False, 0, p, 4, 64)
             for t in (0, 4) for p in (60, 64, 67)]
    notes += [NoteEvent(8, False, 0, p, 4, 64) for p in (65, 69, 72)]
    changes = detect_chords(piece_of(notes))
    ticks = [t for t, _ in changes]
    assert ticks == sorted(set(ticks))
    labels = [c for _, c in changes]
    assert all(a != b for a, b in zip(labels, labels[1:]))


def test_drums_excluded_from_profile():
    notes = [NoteEvent(0, True, 0, p, 4, 64) for p in (60, 64, 67)]
    assert detect_chords(piece_of(notes)) == [(0, NO_CHORD)]


def test_matches_brute_force_scorer_on_random_pieces(vocab44):
    rng = np.random.default_rng(99)
    for i in range(12):
        piece = synthetic.random_piece(rng, vocab44, n_notes=40,
                                       source_id=f"c{i}")
        end = max(n.onset_tick + n.duration_ticks for n in piece.notes)
        n_beats = (end + 3) // 4
        for beat in range(n_beats):
            weights = pitch_class_weights(piece, beat)
            assert label_beat(weights) == brute_force_label(weights)


def test_detection_shifts_with_pitch_augmentation(vocab44):
    from fugato.midi import augment_pitch

    notes = [NoteEvent(0, False, 0, p, 8, 64) for p in (60, 64, 67)]
    base = detect_chords(piece_of(notes))
    shifted = detect_chords(augment_pitch(piece_of(notes), 2))
    assert base[0][1] == "C:maj"
    assert shifted[0][1] == "D:maj"
