import numpy as np
import pytest

from fugato import synthetic
from fugato.errors import ConfigError, DataError, MidiParseError
from fugato.midi import (
    CorpusSplit,
    FilterCriteria,
    NoteEvent,
    Piece,
    augment_pitch,
    filter_corpus,
    load_corpus,
    parse_midi,
    piece_from_dict,
    piece_to_dict,
    quantize,
    save_corpus,
    split_corpus,
    write_midi,
)

from smf_oracle import dump_events, notes_from_dump


def varlen(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def track(events):
    body = b"".join(varlen(delta) + payload for delta, payload in events)
    body += varlen(0) + bytes([0xFF, 0x2F, 0x00])
    return b"MTrk" + len(body).to_bytes(4, "big") + body


def smf(tracks, division=480, fmt=1):
    header = b"MThd" + (6).to_bytes(4, "big") + fmt.to_bytes(2, "big")
    header += len(tracks).to_bytes(2, "big") + division.to_bytes(2, "big")
    return header + b"".join(tracks)


def simple_piece(notes, resolution=4, tempo=None):
    return Piece(
        notes=notes,
        time_signature=(4, 4),
        tempo_changes=tempo or [(0, 120.0)],
        resolution=resolution,
        source_id="test",
    )


class TestParse:
    def test_single_note(self):
        data = smf([track([
            (0, bytes([0x90, 60, 100])),
            (480, bytes([0x80, 60, 0])),
        ])])
        piece = parse_midi(data)
        assert piece.notes == [
            NoteEvent(onset_tick=0, is_drum=False, program=0, pitch=60,
                      duration_ticks=480, velocity=100)
        ]

    def test_zero_length_stream_is_a_parse_error(self):
        with pytest.raises(MidiParseError):
            parse_midi(b"")

    def test_bad_magic_names_offset(self):
        with pytest.raises(MidiParseError) as err:
            parse_midi(b"XXXX" + bytes(20))
        assert err.value.offset == 0

    def test_truncated_track_is_an_error(self):
        good = smf([track([(0, bytes([0x90, 60, 100])),
                           (10, bytes([0x80, 60, 0]))])])
        with pytest.raises(MidiParseError):
            parse_midi(good[:-6])

    def test_two_track_file_merges_against_independent_dump(self):
        t1 = track([
            (0, bytes([0x90, 60, 90])), (120, bytes([0x80, 60, 0])),
            (0, bytes([0x90, 64, 80])), (240, bytes([0x80, 64, 0])),
            (0, bytes([0x90, 67, 70])), (60, bytes([0x80, 67, 0])),
        ])
        t2 = track([
            (0, bytes([0xC1, 42])),
            (30, bytes([0x91, 50, 99])), (90, bytes([0x81, 50, 0])),
            (0, bytes([0x91, 52, 88])), (200, bytes([0x81, 52, 0])),
            (0, bytes([0x91, 54, 77])), (111, bytes([0x81, 54, 0])),
        ])
        data = smf([t1, t2])
        piece = parse_midi(data)
        assert len(piece.notes) == 6

        _, events = dump_events(data)
        expected = notes_from_dump(events)
        parsed = [
            (n.onset_tick, n.is_drum, n.program, n.pitch, n.duration_ticks,
             n.velocity)
            for n in piece.notes
        ]
        assert sorted(parsed) == expected

    def test_note_on_without_off_closes_at_track_end_with_warning(self):
        data = smf([track([
            (0, bytes([0x90, 60, 100])),
            (100, bytes([0x90, 62, 100])),
            (50, bytes([0x80, 62, 0])),
        ])])
        piece = parse_midi(data)
        assert piece.warnings["note_on_without_off"] == 1
        sixty = [n for n in piece.notes if n.pitch == 60][0]
        assert sixty.duration_ticks == 150

    def test_running_status_and_velocity_zero_note_off(self):
        data = smf([track([
            (0, bytes([0x90, 60, 100])),
            (120, bytes([62, 100])),      # running status note-on
            (120, bytes([60, 0])),        # running status off via vel 0
            (60, bytes([62, 0])),
        ])])
        piece = parse_midi(data)
        assert {(n.pitch, n.duration_ticks) for n in piece.notes} == {
            (60, 240), (62, 180)
        }

    def test_channel_10_is_drums(self):
        data = smf([track([
            (0, bytes([0x99, 36, 100])),
            (10, bytes([0x89, 36, 0])),
        ])])
        piece = parse_midi(data)
        assert piece.notes[0].is_drum

    def test_time_signature_change_rejected(self):
        data = smf([track([
            (0, bytes([0xFF, 0x58, 0x04, 4, 2, 24, 8])),
            (100, bytes([0xFF, 0x58, 0x04, 3, 2, 24, 8])),
        ])])
        with pytest.raises(DataError):
            parse_midi(data)

    def test_tempo_meta_captured(self):
        data = smf([track([
            (0, bytes([0xFF, 0x51, 0x03]) + (500000).to_bytes(3, "big")),
            (0, bytes([0x90, 60, 100])),
            (480, bytes([0x80, 60, 0])),
        ])])
        piece = parse_midi(data)
        assert piece.tempo_changes == [(0, 120.0)]


class TestQuantize:
    def test_nearest_grid_rounding(self):
        piece = simple_piece(
            [NoteEvent(479, False, 0, 60, 480, 100)], resolution=480
        )
        out = quantize(piece, 4)
        assert out.notes[0].onset_tick == 4
        assert out.resolution == 4

    def test_minimum_duration_clamp(self):
        piece = simple_piece(
            [NoteEvent(0, False, 0, 60, 30, 100)], resolution=480
        )
        out = quantize(piece, 4)
        assert out.notes[0].duration_ticks == 1

    def test_merge_keeps_max_duration(self):
        piece = simple_piece(
            [NoteEvent(0, False, 0, 60, 100, 90),
             NoteEvent(5, False, 0, 60, 300, 50)],
            resolution=480,
        )
        out = quantize(piece, 4)
        assert len(out.notes) == 1
        assert out.notes[0].duration_ticks == 3  # 300/120 = 2.5 -> 3

    def test_idempotent_on_random_pieces(self, vocab44):
        rng = np.random.default_rng(7)
        for i in range(10):
            piece = synthetic.random_piece(rng, vocab44, n_notes=200,
                                           source_id=f"q{i}")
            once = quantize(piece, 4)
            twice = quantize(once, 4)
            assert twice.same_music(once)

    def test_monotone_onsets(self):
        rng = np.random.default_rng(3)
        onsets = np.sort(rng.integers(0, 4000, size=50))
        piece = simple_piece(
            [NoteEvent(int(o), False, 0, 40 + i, 37, 64)
             for i, o in enumerate(onsets)],
            resolution=480,
        )
        out = quantize(piece, 4)
        snapped = [n.onset_tick for n in sorted(out.notes, key=lambda n: n.pitch)]
        assert all(a <= b for a, b in zip(snapped, snapped[1:]))

    def test_zero_resolution_rejected(self):
        with pytest.raises(ConfigError):
            quantize(simple_piece([NoteEvent(0, False, 0, 60, 1, 64)]), 0)


class TestFilter:
    def make(self, n_notes=100, n_instruments=4, tempo=None, ts=(4, 4)):
        notes = [
            NoteEvent(i, False, i % n_instruments, 60, 1, 64)
            for i in range(n_notes)
        ]
        return Piece(notes=notes, time_signature=ts,
                     tempo_changes=tempo or [(0, 120.0)], resolution=4,
                     source_id=f"f{n_notes}-{n_instruments}")

    def test_minimum_four_instruments(self):
        piece = self.make(n_instruments=3)
        result = filter_corpus([piece],
                               FilterCriteria(min_notes=0, min_instruments=4))
        assert result.pieces == []
        assert result.rejections == {"too_few_instruments": 1}

    def test_empty_criteria_is_identity(self):
        pieces = [self.make(), self.make(n_notes=5)]
        result = filter_corpus(
            pieces,
            FilterCriteria(require_time_signature=False, min_notes=None,
                           max_notes=None, max_tempo_changes=None,
                           beat_aligned_tempo=False),
        )
        assert result.pieces == pieces
        assert result.rejections == {}

    def test_min_notes_matches_brute_force(self, vocab44):
        rng = np.random.default_rng(5)
        pieces = [
            synthetic.random_piece(rng, vocab44,
                                   n_notes=int(rng.integers(10, 100)),
                                   source_id=f"bf{i}")
            for i in range(100)
        ]
        criteria = FilterCriteria(min_notes=50, max_notes=None,
                                  max_tempo_changes=None,
                                  beat_aligned_tempo=False)
        result = filter_corpus(pieces, criteria)
        expected = [p for p in pieces if len(p.notes) >= 50]
        assert result.pieces == expected
        assert result.rejections.get("too_few_notes", 0) == 100 - len(expected)

    def test_expressive_tempo_proxy(self):
        many = self.make(tempo=[(i * 4, 60.0 + i) for i in range(10)])
        off_beat = self.make(tempo=[(0, 120.0), (3, 100.0)])
        result = filter_corpus([many, off_beat], FilterCriteria(min_notes=0))
        assert result.pieces == []
        assert result.rejections == {"expressive_tempo": 1, "off_beat_tempo": 1}

    def test_missing_time_signature(self):
        piece = self.make(ts=None)
        result = filter_corpus([piece], FilterCriteria(min_notes=0))
        assert result.rejections == {"no_time_signature": 1}

    def test_negative_threshold_rejected(self):
        with pytest.raises(ConfigError):
            FilterCriteria(min_notes=-1)


class TestAugment:
    def test_zero_shift_identity(self, random_pieces):
        piece = random_pieces[0]
        assert augment_pitch(piece, 0) is piece

    def test_basic_shift_and_drum_exclusion(self):
        piece = simple_piece([
            NoteEvent(0, False, 0, 60, 1, 64),
            NoteEvent(0, True, 0, 36, 1, 64),
        ])
        out = augment_pitch(piece, 6)
        by_drum = {n.is_drum: n.pitch for n in out.notes}
        assert by_drum[False] == 66
        assert by_drum[True] == 36

    def test_boundary_clamps_by_octave(self):
        piece = simple_piece([NoteEvent(0, False, 0, 125, 1, 64)])
        assert augment_pitch(piece, 6).notes[0].pitch == 119
        low = simple_piece([NoteEvent(0, False, 0, 2, 1, 64)])
        assert augment_pitch(low, -5).notes[0].pitch == 9

    def test_invertible_when_no_clamp(self, random_pieces):
        for piece in random_pieces[:4]:
            out = augment_pitch(augment_pitch(piece, 5), -5)
            assert out.same_music(piece)

    def test_out_of_range_shift_rejected(self, random_pieces):
        with pytest.raises(ConfigError):
            augment_pitch(random_pieces[0], 7)


class TestSplit:
    def pieces(self, n, vocab):
        rng = np.random.default_rng(n)
        return [synthetic.random_piece(rng, vocab, n_notes=12,
                                       source_id=f"s{i:03d}")
                for i in range(n)]

    def test_exact_tenths(self, vocab44):
        split = split_corpus(self.pieces(10, vocab44), seed=1)
        assert (len(split.valid), len(split.test), len(split.train)) == (1, 1, 8)

    def test_thirty_seven_pieces(self, vocab44):
        split = split_corpus(self.pieces(37, vocab44), seed=1)
        assert (len(split.valid), len(split.test), len(split.train)) == (3, 3, 31)

    def test_deterministic_and_disjoint(self, vocab44):
        pieces = self.pieces(23, vocab44)
        a = split_corpus(pieces, seed=9)
        b = split_corpus(pieces, seed=9)
        assert a == b
        groups = [set(a.train), set(a.valid), set(a.test)]
        assert not (groups[0] & groups[1] | groups[0] & groups[2]
                    | groups[1] & groups[2])
        assert set().union(*groups) == {p.source_id for p in pieces}

    def test_too_few_pieces(self, vocab44):
        with pytest.raises(ConfigError):
            split_corpus(self.pieces(9, vocab44), seed=0)

    def test_json_round_trip(self, vocab44):
        split = split_corpus(self.pieces(12, vocab44), seed=2)
        assert CorpusSplit.from_json(split.to_json()) == split


class TestWrite:
    def test_single_note_round_trip(self):
        piece = simple_piece([NoteEvent(3, False, 5, 72, 2, 97)])
        back = quantize(parse_midi(write_midi(piece)), 4)
        assert back.same_music(piece)

    def test_channels_distinct_and_drums_on_ten(self):
        piece = simple_piece([
            NoteEvent(0, False, 0, 60, 1, 64),
            NoteEvent(0, False, 40, 62, 1, 64),
            NoteEvent(0, True, 0, 36, 1, 64),
        ])
        _, events = dump_events(write_midi(piece))
        note_channels = {e[3] for e in events if e[2] == 0x90}
        assert len(note_channels) == 3
        assert 9 in note_channels  # drum channel (0-indexed 9 = channel 10)

    def test_empty_piece_rejected(self):
        with pytest.raises(DataError):
            write_midi(Piece([], (4, 4), [(0, 120.0)], 4))

    def test_500_note_round_trip(self, vocab44):
        rng = np.random.default_rng(11)
        piece = synthetic.random_piece(rng, vocab44, n_notes=500,
                                       n_instruments=6, with_drums=True,
                                       source_id="big")
        back = quantize(parse_midi(write_midi(piece), "big"), piece.resolution)
        assert back.same_music(piece)

    def test_overlapping_same_pitch_notes_survive(self):
        piece = simple_piece([
            NoteEvent(0, False, 0, 60, 8, 70),
            NoteEvent(2, False, 0, 60, 2, 80),
        ])
        back = quantize(parse_midi(write_midi(piece)), 4)
        assert back.same_music(piece)

    def test_round_trip_many_random_pieces(self, random_pieces):
        for piece in random_pieces:
            back = quantize(parse_midi(write_midi(piece), piece.source_id),
                            piece.resolution)
            assert back.same_music(piece)


class TestCorpusIO:
    def test_piece_dict_round_trip(self, random_pieces):
        for piece in random_pieces:
            assert piece_from_dict(piece_to_dict(piece)).same_music(piece)

    def test_save_load_corpus(self, tmp_path, random_pieces):
        save_corpus(random_pieces, tmp_path)
        loaded = load_corpus(tmp_path)
        assert len(loaded) == len(random_pieces)
        for a, b in zip(loaded, random_pieces):
            assert a.same_music(b)
            assert a.source_id == b.source_id
