"""Independent Standard-MIDI-File event dump used as a parsing oracle.

Deliberately written as a flat single-pass walker with no shared code:
it returns raw channel events with absolute ticks and leaves all
interpretation (note pairing, drum flags) to the caller, so tests can
cross-check the library parser against a second reading of the bytes.
"""

from __future__ import annotations


def dump_events(data: bytes):
    """Returns (ticks_per_quarter, [(track, tick, kind, channel, d1, d2)]).

    kind is the raw status high nibble (0x80 note-off, 0x90 note-on, 0xC0
    program, ...). Meta events appear with kind 0xFF, channel -1, d1 =
    meta type; tempo and time-signature payloads are returned in d2.
    """
    assert data[:4] == b"MThd"
    header_len = int.from_bytes(data[4:8], "big")
    division = int.from_bytes(data[12:14], "big")
    assert not division & 0x8000
    pos = 8 + header_len
    events = []
    track_no = 0
    while pos < len(data):
        assert data[pos : pos + 4] == b"MTrk"
        length = int.from_bytes(data[pos + 4 : pos + 8], "big")
        cursor = pos + 8
        end = cursor + length
        tick = 0
        status = 0

        def varlen(c):
            value = 0
            while True:
                byte = data[c]
                c += 1
                value = (value << 7) | (byte & 0x7F)
                if not byte & 0x80:
                    return value, c

        while cursor < end:
            delta, cursor = varlen(cursor)
            tick += delta
            if data[cursor] & 0x80:
                status = data[cursor]
                cursor += 1
            if status == 0xFF:
                meta = data[cursor]
                cursor += 1
                length2, cursor = varlen(cursor)
                payload = data[cursor : cursor + length2]
                cursor += length2
                events.append((track_no, tick, 0xFF, -1, meta, payload))
                if meta == 0x2F:
                    break
            elif status in (0xF0, 0xF7):
                length2, cursor = varlen(cursor)
                cursor += length2
            else:
                kind = status & 0xF0
                channel = status & 0x0F
                if kind in (0xC0, 0xD0):
                    events.append((track_no, tick, kind, channel,
                                   data[cursor], 0))
                    cursor += 1
                else:
                    events.append((track_no, tick, kind, channel,
                                   data[cursor], data[cursor + 1]))
                    cursor += 2
        pos = end
        track_no += 1
    return division & 0x7FFF, events


def notes_from_dump(events):
    """FIFO per-(track, channel, pitch) note pairing over dumped events."""
    active = {}
    program = {}
    notes = []
    for track, tick, kind, channel, d1, d2 in events:
        if kind == 0xC0:
            program[(track, channel)] = d1
        elif kind == 0x90 and d2 > 0:
            active.setdefault((track, channel, d1), []).append(
                (tick, d2, program.get((track, channel), 0))
            )
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            queue = active.get((track, channel, d1))
            if queue:
                onset, velocity, prog = queue.pop(0)
                notes.append(
                    (onset, channel == 9, prog, d1, max(1, tick - onset),
                     velocity)
                )
    return sorted(notes)
