"""Grid-level song representation: notes on a 96-step measure grid, four tracks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

STEPS_PER_MEASURE = 96
BEATS_PER_MEASURE = 4


class TrackRole(enum.IntEnum):
    BASS = 0
    DRUMS = 1
    GUITAR_PIANO = 2
    STRINGS = 3

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "TrackRole":
        return cls[key.upper()]


ROLES: tuple[TrackRole, ...] = tuple(TrackRole)
N_TRACKS = len(ROLES)


@dataclass(frozen=True, slots=True, order=True)
class NoteEvent:
    """One note: onset offset from the measure start, MIDI pitch, length in steps."""

    time: int
    pitch: int
    duration: int

    def __post_init__(self) -> None:
        if not 0 <= self.time < STEPS_PER_MEASURE:
            raise ValueError(f"time {self.time} outside [0, {STEPS_PER_MEASURE - 1}]")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if not 1 <= self.duration <= STEPS_PER_MEASURE:
            raise ValueError(f"duration {self.duration} outside [1, {STEPS_PER_MEASURE}]")


@dataclass(frozen=True, slots=True)
class TrackMeasure:
    """Notes of one track within one measure, kept sorted and free of duplicates."""

    role: TrackRole
    notes: tuple[NoteEvent, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", TrackRole(self.role))
        object.__setattr__(self, "notes", tuple(sorted(set(self.notes))))

    def __len__(self) -> int:
        return len(self.notes)

    @property
    def is_empty(self) -> bool:
        return not self.notes


@dataclass(frozen=True, slots=True)
class GridSong:
    """``n_measures`` measures, each holding one :class:`TrackMeasure` per role.

    ``tracks[t][i]`` is the measure ``i`` of role ``t``.
    """

    tracks: tuple[tuple[TrackMeasure, ...], ...]
    n_measures: int = field(init=False)

    def __post_init__(self) -> None:
        tracks = tuple(tuple(t) for t in self.tracks)
        if len(tracks) != N_TRACKS:
            raise ValueError(f"expected {N_TRACKS} tracks, got {len(tracks)}")
        lengths = {len(t) for t in tracks}
        if len(lengths) != 1:
            raise ValueError(f"tracks have unequal lengths {sorted(lengths)}")
        n = lengths.pop()
        if n < 1:
            raise ValueError("a song needs at least one measure")
        for role, track in zip(ROLES, tracks):
            if any(m.role != role for m in track):
                raise ValueError(f"track {role.key} holds measures of another role")
        object.__setattr__(self, "tracks", tracks)
        object.__setattr__(self, "n_measures", n)

    @classmethod
    def empty(cls, n_measures: int) -> "GridSong":
        return cls(tuple(tuple(TrackMeasure(r) for _ in range(n_measures)) for r in ROLES))

    @classmethod
    def from_notes(cls, n_measures: int, notes: Iterable[tuple[TrackRole, int, NoteEvent]]) -> "GridSong":
        """Build a song from ``(role, measure_index, note)`` triples."""
        buckets: list[list[list[NoteEvent]]] = [[[] for _ in range(n_measures)] for _ in ROLES]
        for role, measure, note in notes:
            buckets[role][measure].append(note)
        return cls(
            tuple(
                tuple(TrackMeasure(role, tuple(b)) for b in buckets[role])
                for role in ROLES
            )
        )

    def track(self, role: TrackRole) -> tuple[TrackMeasure, ...]:
        return self.tracks[role]

    def measure(self, index: int) -> tuple[TrackMeasure, ...]:
        return tuple(t[index] for t in self.tracks)

    def window(self, start: int, length: int) -> "GridSong":
        if start < 0 or start + length > self.n_measures:
            raise IndexError(f"window [{start}, {start + length}) outside song of {self.n_measures}")
        return GridSong(tuple(t[start : start + length] for t in self.tracks))


def route_instrument(channel: int, program: int) -> TrackRole | None:
    """Map a MIDI channel/program pair onto a track role; ``None`` means discard."""
    if channel == 9:
        return TrackRole.DRUMS
    if 32 <= program <= 39:
        return TrackRole.BASS
    if 0 <= program <= 31:
        return TrackRole.GUITAR_PIANO
    if 40 <= program <= 55:
        return TrackRole.STRINGS
    return None


def concat_songs(songs: Sequence[GridSong]) -> GridSong:
    return GridSong(tuple(sum((s.tracks[r] for s in songs), ()) for r in ROLES))
