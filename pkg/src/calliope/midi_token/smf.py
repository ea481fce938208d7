"""Standard MIDI File (formats 0 and 1) reading and writing, plus grid quantization."""

from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .grid import (
    BEATS_PER_MEASURE,
    ROLES,
    STEPS_PER_MEASURE,
    GridSong,
    NoteEvent,
    TrackRole,
    route_instrument,
)


class MidiError(Exception):
    pass


class MalformedHeader(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class EmptyAfterQuantize(MidiError):
    pass


class UnsupportedMeter(MidiError):
    pass


@dataclass(frozen=True, slots=True)
class RawNote:
    start: int  # absolute ticks
    end: int
    channel: int
    program: int
    pitch: int
    velocity: int


@dataclass(slots=True)
class MidiSongRaw:
    ticks_per_beat: int
    format: int
    notes: list[RawNote] = field(default_factory=list)
    tempos: list[tuple[int, int]] = field(default_factory=list)  # (tick, us per beat)
    time_signatures: list[tuple[int, int, int]] = field(default_factory=list)  # (tick, num, den)
    end_tick: int = 0

    @property
    def is_four_four(self) -> bool:
        return all((num, den) == (4, 4) for _, num, den in self.time_signatures)


_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None) -> None:
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedChunk(f"need {n} bytes at offset {self.pos}, chunk ends at {self.end}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self.take(1)[0]

    def vlq(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise TruncatedChunk(f"variable-length quantity longer than 4 bytes at offset {self.pos}")

    @property
    def done(self) -> bool:
        return self.pos >= self.end


def _parse_track(reader: _Reader, track_index: int) -> tuple[list[tuple], int]:
    """Decode one MTrk body into ``(tick, track, seq, kind, *payload)`` tuples."""
    events: list[tuple] = []
    tick = 0
    status = None
    seq = 0
    while not reader.done:
        tick += reader.vlq()
        first = reader.byte()
        if first == 0xFF:
            kind = reader.byte()
            body = reader.take(reader.vlq())
            if kind == 0x2F:
                break
            if kind == 0x51 and len(body) == 3:
                events.append((tick, track_index, seq, "tempo", int.from_bytes(body, "big")))
            elif kind == 0x58 and len(body) >= 2:
                events.append((tick, track_index, seq, "timesig", body[0], 2 ** body[1]))
            seq += 1
            continue
        if first in (0xF0, 0xF7):
            reader.take(reader.vlq())
            status = None
            continue
        if first > 0xF0:
            reader.take({0xF2: 2, 0xF3: 1}.get(first, 0))
            continue
        if first & 0x80:
            status = first
            data = reader.take(_DATA_LEN.get(first & 0xF0, 0))
        else:
            if status is None:
                raise TruncatedChunk(f"data byte without running status at offset {reader.pos - 1}")
            data = bytes([first]) + reader.take(_DATA_LEN[status & 0xF0] - 1)
        kind, channel = status & 0xF0, status & 0x0F
        if kind == 0x90 and data[1] > 0:
            events.append((tick, track_index, seq, "on", channel, data[0], data[1]))
        elif kind == 0x80 or kind == 0x90:
            events.append((tick, track_index, seq, "off", channel, data[0]))
        elif kind == 0xC0:
            events.append((tick, track_index, seq, "program", channel, data[0]))
        seq += 1
    return events, tick


def parse_smf(data: bytes) -> MidiSongRaw:
    """Parse SMF bytes into absolute-tick notes with their channel and program.

    Note-ons left open are closed at the end of their track.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header chunk")
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MalformedHeader(f"bad header length {hlen}")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 is not supported")
    if fmt > 2:
        raise MalformedHeader(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("zero ticks per beat")

    pos = 8 + hlen
    events: list[tuple] = []
    track_ends: list[int] = []
    while len(track_ends) < ntracks:
        if pos + 8 > len(data):
            raise TruncatedChunk(f"expected {ntracks} tracks, found {len(track_ends)}")
        kind = data[pos : pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        body_end = pos + 8 + length
        if body_end > len(data):
            raise TruncatedChunk(f"chunk {kind!r} at offset {pos} runs past end of file")
        if kind == b"MTrk":
            track_events, end = _parse_track(_Reader(data, pos + 8, body_end), len(track_ends))
            events.extend(track_events)
            track_ends.append(end)
        pos = body_end

    song = MidiSongRaw(ticks_per_beat=division, format=fmt, end_tick=max(track_ends, default=0))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    programs = [0] * 16
    open_notes: dict[tuple[int, int], deque] = defaultdict(deque)
    for ev in events:
        tick, track, kind = ev[0], ev[1], ev[3]
        if kind == "tempo":
            song.tempos.append((tick, ev[4]))
        elif kind == "timesig":
            song.time_signatures.append((tick, ev[4], ev[5]))
        elif kind == "program":
            programs[ev[4]] = ev[5]
        elif kind == "on":
            _, _, _, _, ch, pitch, vel = ev
            open_notes[(ch, pitch)].append((tick, track, programs[ch], vel))
        elif kind == "off":
            queue = open_notes.get((ev[4], ev[5]))
            if queue:
                start, _, program, vel = queue.popleft()
                song.notes.append(RawNote(start, tick, ev[4], program, ev[5], vel))
    for (ch, pitch), queue in open_notes.items():
        for start, track, program, vel in queue:
            song.notes.append(RawNote(start, track_ends[track], ch, program, pitch, vel))
    song.notes.sort(key=lambda n: (n.start, n.channel, n.pitch, n.end))
    return song


def _round_ratio(num: int, den: int) -> int:
    """Round ``num / den`` to the nearest integer, halves away from zero (num >= 0)."""
    return (2 * num + den) // (2 * den)


def quantize(raw: MidiSongRaw, steps_per_measure: int = STEPS_PER_MEASURE) -> GridSong:
    """Snap notes onto the measure grid and route them to the four track roles.

    Onsets and durations round to the nearest step; durations are clamped to
    at least one step and truncated at the end of the onset's measure.
    """
    if not raw.is_four_four:
        raise UnsupportedMeter(f"only 4/4 is supported, found {raw.time_signatures}")
    steps_per_beat = steps_per_measure // BEATS_PER_MEASURE
    tpb = raw.ticks_per_beat
    placed: list[tuple[TrackRole, int, NoteEvent]] = []
    for note in raw.notes:
        role = route_instrument(note.channel, note.program)
        if role is None or not 0 <= note.pitch <= 127:
            continue
        onset = _round_ratio(note.start * steps_per_beat, tpb)
        length = _round_ratio((note.end - note.start) * steps_per_beat, tpb)
        measure, time = divmod(onset, steps_per_measure)
        duration = min(max(length, 1), steps_per_measure - time)
        placed.append((role, measure, NoteEvent(time, note.pitch, duration)))
    if not placed:
        raise EmptyAfterQuantize("no routable notes in file")
    n_measures = max(m for _, m, _ in placed) + 1
    return GridSong.from_notes(n_measures, placed)


# role -> (channel, program) used when writing
ROLE_CHANNELS: dict[TrackRole, tuple[int, int]] = {
    TrackRole.BASS: (0, 33),
    TrackRole.DRUMS: (9, 0),
    TrackRole.GUITAR_PIANO: (1, 0),
    TrackRole.STRINGS: (2, 48),
}


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _chunk(kind: bytes, body: bytes) -> bytes:
    return kind + struct.pack(">I", len(body)) + body


def _track_body(timed: list[tuple[int, int, bytes]]) -> bytes:
    out = bytearray()
    last = 0
    for tick, _, msg in sorted(timed, key=lambda e: (e[0], e[1])):
        out += _vlq(tick - last) + msg
        last = tick
    out += _vlq(0) + b"\xff\x2f\x00"
    return bytes(out)


def write_smf(song: GridSong, ticks_per_step: int = 5, tempo_us: int = 500_000, velocity: int = 100) -> bytes:
    """Render a song as a format-1 file: one conductor track plus one track per role.

    Same-pitch notes that overlap inside one track cannot be told apart by a
    reader and will not survive a round trip; trailing empty measures are
    likewise lost on re-quantization.
    """
    steps_per_beat = STEPS_PER_MEASURE // BEATS_PER_MEASURE
    tpb = steps_per_beat * ticks_per_step
    if not 0 < tpb < 0x8000:
        raise ValueError(f"ticks_per_step {ticks_per_step} gives invalid division {tpb}")
    conductor = [
        (0, 0, b"\xff\x51\x03" + tempo_us.to_bytes(3, "big")),
        (0, 1, b"\xff\x58\x04\x04\x02\x18\x08"),
    ]
    chunks = [_chunk(b"MTrk", _track_body(conductor))]
    for role in ROLES:
        channel, program = ROLE_CHANNELS[role]
        timed: list[tuple[int, int, bytes]] = [
            (0, 0, b"\xff\x03" + _vlq(len(role.key)) + role.key.encode()),
            (0, 1, bytes([0xC0 | channel, program])),
        ]
        for index, measure in enumerate(song.tracks[role]):
            base = index * STEPS_PER_MEASURE
            for note in measure.notes:
                on = (base + note.time) * ticks_per_step
                off = on + note.duration * ticks_per_step
                # at equal ticks note-offs sort before note-ons
                timed.append((on, 3, bytes([0x90 | channel, note.pitch, velocity])))
                timed.append((off, 2, bytes([0x80 | channel, note.pitch, 0])))
        chunks.append(_chunk(b"MTrk", _track_body(timed)))
    header = _chunk(b"MThd", struct.pack(">HHH", 1, len(chunks), tpb))
    return header + b"".join(chunks)
