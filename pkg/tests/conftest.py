from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from calliope.midi_token import ROLES, GridSong, NoteEvent, TrackMeasure, TrackRole

note_events = st.builds(
    NoteEvent,
    time=st.integers(0, 95),
    pitch=st.integers(0, 127),
    duration=st.integers(1, 96),
)


def track_measures(max_notes: int = 24, role=None):
    roles = st.sampled_from(list(ROLES)) if role is None else st.just(role)
    return st.builds(TrackMeasure, role=roles, notes=st.lists(note_events, max_size=max_notes).map(tuple))


def random_note(rng: np.random.Generator) -> NoteEvent:
    return NoteEvent(int(rng.integers(0, 96)), int(rng.integers(0, 128)), int(rng.integers(1, 97)))


def random_measure(rng: np.random.Generator, role: TrackRole, max_notes: int = 24) -> TrackMeasure:
    return TrackMeasure(role, tuple(random_note(rng) for _ in range(int(rng.integers(0, max_notes + 1)))))


def random_song(
    rng: np.random.Generator,
    n_measures: int,
    max_notes: int = 5,
    pitch_range: tuple[int, int] = (0, 128),
    max_duration: int = 96,
    empty_prob: float = 0.0,
) -> GridSong:
    """Random song; every measure-track holds at most ``max_notes`` notes."""
    tracks = []
    for role in ROLES:
        measures = []
        for _ in range(n_measures):
            k = 0 if rng.random() < empty_prob else int(rng.integers(0, max_notes + 1))
            notes = tuple(
                NoteEvent(
                    int(rng.integers(0, 96)),
                    int(rng.integers(*pitch_range)),
                    int(rng.integers(1, max_duration + 1)),
                )
                for _ in range(k)
            )
            measures.append(TrackMeasure(role, notes))
        tracks.append(tuple(measures))
    return GridSong(tuple(tracks))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
