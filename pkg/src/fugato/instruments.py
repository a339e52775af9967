"""Instrument vocabulary: General MIDI programs trimmed to 61 classes.

The 128 GM programs are grouped into 60 pitched classes (rare programs
collapse onto a family representative) plus one drum class. The table is
a fixed external convention shipped with the package; decoding maps each
class back to its representative program (the first program listed).
"""

from __future__ import annotations

# (class name, GM programs that collapse onto it); order defines class ids.
_PITCHED_CLASSES: list[tuple[str, list[int]]] = [
    ("piano", [0, 1, 2, 3]),
    ("electric-piano", [4, 5]),
    ("harpsichord", [6]),
    ("clavinet", [7]),
    ("bells", [8, 9, 10, 14]),
    ("vibraphone", [11]),
    ("marimba", [12, 13]),
    ("dulcimer", [15]),
    ("organ", [16, 17, 18]),
    ("church-organ", [19, 20]),
    ("accordion", [21, 23]),
    ("harmonica", [22]),
    ("nylon-guitar", [24]),
    ("steel-guitar", [25]),
    ("jazz-guitar", [26]),
    ("clean-guitar", [27]),
    ("muted-guitar", [28]),
    ("distortion-guitar", [29, 30, 31]),
    ("acoustic-bass", [32]),
    ("electric-bass", [33, 34]),
    ("fretless-bass", [35]),
    ("slap-bass", [36, 37]),
    ("synth-bass", [38, 39]),
    ("violin", [40]),
    ("viola", [41]),
    ("cello", [42]),
    ("contrabass", [43]),
    ("tremolo-strings", [44]),
    ("pizzicato-strings", [45]),
    ("harp", [46]),
    ("timpani", [47]),
    ("string-ensemble", [48, 49]),
    ("synth-strings", [50, 51]),
    ("choir", [52, 53]),
    ("synth-voice", [54]),
    ("orchestra-hit", [55]),
    ("trumpet", [56]),
    ("trombone", [57]),
    ("tuba", [58]),
    ("muted-trumpet", [59]),
    ("french-horn", [60]),
    ("brass-section", [61]),
    ("synth-brass", [62, 63]),
    ("soprano-sax", [64]),
    ("alto-sax", [65]),
    ("tenor-sax", [66]),
    ("baritone-sax", [67]),
    ("oboe", [68]),
    ("english-horn", [69]),
    ("bassoon", [70]),
    ("clarinet", [71]),
    ("piccolo", [72]),
    ("flute", [73]),
    ("pipe", [74, 75, 76, 77, 78, 79]),
    ("synth-lead", [80, 81, 82, 83, 84, 85, 86, 87]),
    ("synth-pad", [88, 89, 90, 91, 92, 93, 94, 95]),
    ("synth-effects", [96, 97, 98, 99, 100, 101, 102, 103]),
    ("ethnic", [104, 105, 106, 107, 108, 109, 110, 111]),
    ("percussive", [112, 113, 114, 115, 116, 117, 118, 119]),
    ("sound-effects", [120, 121, 122, 123, 124, 125, 126, 127]),
]

DRUM_CLASS = "drums"

CLASS_NAMES: list[str] = [name for name, _ in _PITCHED_CLASSES] + [DRUM_CLASS]

_PROGRAM_TO_CLASS: dict[int, str] = {}
for _name, _programs in _PITCHED_CLASSES:
    for _p in _programs:
        _PROGRAM_TO_CLASS[_p] = _name

# class -> representative GM program used when decoding back to MIDI
REPRESENTATIVE_PROGRAM: dict[str, int] = {
    name: programs[0] for name, programs in _PITCHED_CLASSES
}


def instrument_class(program: int, is_drum: bool) -> str:
    """Map a GM program (plus drum flag) to its instrument class name."""
    if is_drum:
        return DRUM_CLASS
    return _PROGRAM_TO_CLASS[program]


def class_to_instrument(name: str) -> tuple[bool, int]:
    """Inverse of instrument_class, up to the representative program."""
    if name == DRUM_CLASS:
        return (True, 0)
    return (False, REPRESENTATIVE_PROGRAM[name])
