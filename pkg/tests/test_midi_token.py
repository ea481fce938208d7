from __future__ import annotations

import io
import struct

import mido
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calliope.midi_token import (
    EOS,
    PAD,
    SOS,
    CorpusError,
    EmptyAfterQuantize,
    GridSong,
    MalformedHeader,
    MidiSongRaw,
    NoteEvent,
    RawNote,
    TrackMeasure,
    TrackRole,
    TruncatedChunk,
    UnsupportedFormat,
    UnsupportedMeter,
    check_token_seq,
    detokenize,
    detokenize_measure,
    parse_smf,
    quantize,
    read_corpus,
    route_instrument,
    seq_len,
    song_to_tokens,
    tokenize_measure,
    tokens_to_song,
    write_corpus,
    write_smf,
)
from calliope.midi_token import corpus as corpus_mod

from .conftest import random_song, track_measures


def smf(tracks: list[bytes], fmt: int = 0, division: int = 480) -> bytes:
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    for body in tracks:
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


END = b"\x00\xff\x2f\x00"
# delta 480 as a variable-length quantity
VLQ_480 = bytes([0x83, 0x60])


def test_one_note_file_matches_independent_reader():
    body = b"\x00\x90\x3c\x64" + VLQ_480 + b"\x80\x3c\x40" + END
    data = smf([body])
    raw = parse_smf(data)
    assert raw.ticks_per_beat == 480 and raw.format == 0
    assert raw.notes == [RawNote(0, 480, 0, 0, 60, 100)]

    ref = mido.MidiFile(file=io.BytesIO(data))
    tick, ons, offs = 0, [], []
    for msg in ref.tracks[0]:
        tick += msg.time
        if msg.type == "note_on" and msg.velocity:
            ons.append((tick, msg.channel, msg.note))
        elif msg.type in ("note_off", "note_on"):
            offs.append((tick, msg.channel, msg.note))
    assert [(n.start, n.channel, n.pitch) for n in raw.notes] == ons
    assert [(n.end, n.channel, n.pitch) for n in raw.notes] == offs


def test_running_status_and_zero_velocity_off():
    # note-on, then running-status note-on with velocity 0 as note-off
    body = b"\x00\x91\x40\x50" + b"\x60\x40\x00" + END
    raw = parse_smf(smf([body]))
    assert raw.notes == [RawNote(0, 96, 1, 0, 64, 0x50)]


def test_unclosed_note_ends_at_track_end():
    body = b"\x00\x90\x3c\x64" + VLQ_480 + b"\xff\x2f\x00"
    raw = parse_smf(smf([body]))
    assert raw.notes[0].end == 480 and raw.end_tick == 480


def test_program_change_applies_per_channel():
    body = b"\x00\xc3\x21" + b"\x00\x93\x28\x64" + b"\x10\x83\x28\x00" + END
    raw = parse_smf(smf([body]))
    assert raw.notes[0].program == 33 and raw.notes[0].channel == 3


def test_header_errors():
    good = smf([END])
    with pytest.raises(MalformedHeader):
        parse_smf(b"MTXX" + good[4:])
    with pytest.raises(UnsupportedFormat):
        parse_smf(smf([END], fmt=2))
    with pytest.raises(UnsupportedFormat):
        parse_smf(smf([END], division=0xE728))
    with pytest.raises(TruncatedChunk):
        parse_smf(good[:-2])


def _raw(notes, tpb=24, sigs=()):
    return MidiSongRaw(ticks_per_beat=tpb, format=0, notes=list(notes), time_signatures=list(sigs), end_tick=0)


def test_quantize_exact_grid_hit():
    # 24 ticks per beat gives one tick per step; step 12 of measure 3
    start = 3 * 96 + 12
    song = quantize(_raw([RawNote(start, start + 4, 0, 0, 60, 90)]))
    assert song.n_measures == 4
    assert song.tracks[TrackRole.GUITAR_PIANO][3].notes == (NoteEvent(12, 60, 4),)


def test_quantize_truncates_at_measure_end():
    song = quantize(_raw([RawNote(90, 110, 0, 0, 60, 90)]))
    assert song.tracks[TrackRole.GUITAR_PIANO][0].notes == (NoteEvent(90, 60, 6),)


def test_quantize_minimum_duration():
    # 0.4 steps at 240 ticks per beat (10 ticks per step)
    song = quantize(_raw([RawNote(0, 4, 9, 0, 36, 90)], tpb=240))
    assert song.tracks[TrackRole.DRUMS][0].notes == (NoteEvent(0, 36, 1),)


def test_quantize_rejects_other_meters_and_empty():
    with pytest.raises(UnsupportedMeter):
        quantize(_raw([RawNote(0, 4, 0, 0, 60, 90)], sigs=[(0, 3, 4)]))
    with pytest.raises(EmptyAfterQuantize):
        quantize(_raw([RawNote(0, 4, 0, 80, 60, 90)]))


@pytest.mark.parametrize(
    "channel,program,role",
    [
        (9, 0, TrackRole.DRUMS),
        (3, 33, TrackRole.BASS),
        (2, 80, None),
        (0, 0, TrackRole.GUITAR_PIANO),
        (5, 48, TrackRole.STRINGS),
        (9, 40, TrackRole.DRUMS),
    ],
)
def test_route_instrument(channel, program, role):
    assert route_instrument(channel, program) == role


# tokens


def test_tokenize_examples():
    L = seq_len()
    empty = tokenize_measure(TrackMeasure(TrackRole.BASS))
    assert list(empty) == [SOS, EOS] + [PAD] * (L - 2)
    one = tokenize_measure(TrackMeasure(TrackRole.BASS, (NoteEvent(0, 60, 4),)))
    assert list(one[:6]) == [321, 128, 60, 227, 322, 320]
    chord = tokenize_measure(TrackMeasure(TrackRole.BASS, (NoteEvent(0, 64, 1), NoteEvent(0, 60, 1))))
    assert list(chord[:8]) == [321, 128, 60, 224, 128, 64, 224, 322]
    assert L == 74


def test_detokenize_examples():
    bad = detokenize([321, 60, 128, 227, 322])
    assert bad.measure.is_empty and bad.malformed == 3 and bad.terminated
    dup = detokenize_measure([321, 128, 60, 227, 128, 60, 227, 322])
    assert dup.notes == (NoteEvent(0, 60, 4),)


def test_tokenize_drops_lowest_pitches_when_full():
    notes = tuple(NoteEvent(k, 40 + k, 1) for k in range(5))
    ids = tokenize_measure(TrackMeasure(TrackRole.BASS, notes), max_notes=3)
    assert len(ids) == seq_len(3)
    assert detokenize_measure(ids).notes == notes[2:]


@settings(max_examples=300, deadline=None)
@given(track_measures())
def test_round_trip_property(m):
    ids = tokenize_measure(m)
    check_token_seq(ids)
    assert detokenize_measure(ids, m.role) == m


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 322), max_size=40))
def test_detokenize_arbitrary_ids_yields_valid_measure(ids):
    d = detokenize(ids)
    assert list(d.measure.notes) == sorted(set(d.measure.notes))
    assert d.malformed <= len(ids)


def test_check_token_seq_rejects():
    for ids in ([128, 60, 224, 322], [321, 322, 5], [321, 128, 60, 322], [321, 322, 322]):
        with pytest.raises(ValueError):
            check_token_seq(ids)


# writer


def test_write_empty_song_has_four_tracks():
    data = write_smf(GridSong.empty(1))
    ref = mido.MidiFile(file=io.BytesIO(data))
    assert ref.type == 1 and len(ref.tracks) == 5
    assert all(not any(m.type == "note_on" for m in t) for t in ref.tracks)


def test_write_one_note_span():
    song = GridSong.from_notes(1, [(TrackRole.STRINGS, 0, NoteEvent(10, 70, 7))])
    data = write_smf(song, ticks_per_step=5)
    ref = mido.MidiFile(file=io.BytesIO(data))
    events = []
    for track in ref.tracks:
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type in ("note_on", "note_off"):
                events.append((tick, msg.type, msg.note, msg.channel))
    assert events == [(50, "note_on", 70, 2), (85, "note_off", 70, 2)]
    assert ref.ticks_per_beat == 5 * 24


def test_write_parse_round_trip(rng):
    for _ in range(20):
        song = random_song(rng, int(rng.integers(1, 4)), max_notes=6)
        # the last measure must hold a note so the song length survives
        # notes must end inside their measure, since quantize truncates at the bar line
        notes = [
            (r, i, NoteEvent(n.time, n.pitch, min(n.duration, 96 - n.time)))
            for r in TrackRole
            for i, m in enumerate(song.tracks[r])
            for n in m.notes
        ]
        notes.append((TrackRole.BASS, song.n_measures - 1, NoteEvent(0, 30, 1)))
        # overlapping notes of one pitch on one track cannot be told apart once written
        seen, kept = set(), []
        for r, i, n in sorted(notes, key=lambda x: (x[0], x[1], x[2])):
            key = (r, n.pitch)
            start = i * 96 + n.time
            if any(k == key and s <= start < e for k, s, e in seen) or any(
                k == key and start <= s < start + n.duration for k, s, e in seen
            ):
                continue
            seen.add((key, start, start + n.duration))
            kept.append((r, i, n))
        song = GridSong.from_notes(song.n_measures, kept)
        assert quantize(parse_smf(write_smf(song))) == song


# corpus


def test_corpus_round_trip(tmp_path, rng):
    recs = [song_to_tokens(random_song(rng, 2), 12) for _ in range(3)]
    path = tmp_path / "c.bin"
    write_corpus(path, recs)
    back = read_corpus(path)
    assert len(back) == 3
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a, b)
    raw = path.read_bytes()
    assert struct.unpack("<III", raw[:12]) == (2, 4, 38)
    assert np.frombuffer(raw[12 : 12 + 2 * 38], dtype="<u2").tolist() == recs[0][0, 0].tolist()


def test_corpus_truncated():
    data = corpus_mod.dumps([np.full((1, 4, 8), PAD, dtype=np.int64)])
    with pytest.raises(CorpusError):
        corpus_mod.loads(data[:-1])


def test_song_tokens_round_trip(rng):
    for _ in range(50):
        song = random_song(rng, 3, max_notes=12)
        grid = song_to_tokens(song, 12)
        assert grid.shape == (3, 4, 38)
        back, malformed = tokens_to_song(grid)
        assert back == song and malformed == 0
