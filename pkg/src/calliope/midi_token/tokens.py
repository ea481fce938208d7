"""The 323-symbol vocabulary and per-measure token sequences.

Layout of the vocabulary::

    0..127    pitch
    128..223  onset time within the measure
    224..319  duration (1..96 steps)
    320       pad
    321, 322  start / end of sequence

A measure-track becomes ``[SOS] + (time, pitch, duration)* + [EOS] + pad``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import ROLES, STEPS_PER_MEASURE, GridSong, NoteEvent, TrackMeasure, TrackRole

N_PITCHES = 128
PITCH_OFFSET = 0
TIME_OFFSET = 128
DURATION_OFFSET = 224
PAD = 320
SOS = 321
EOS = 322
VOCAB_SIZE = 323
DEFAULT_MAX_NOTES = 24


def seq_len(max_notes: int = DEFAULT_MAX_NOTES) -> int:
    return 3 * max_notes + 2


def max_notes_for(length: int) -> int:
    if length < 2 or (length - 2) % 3:
        raise ValueError(f"sequence length {length} is not 3k+2")
    return (length - 2) // 3


def is_pitch(tok: int) -> bool:
    return PITCH_OFFSET <= tok < PITCH_OFFSET + N_PITCHES


def is_time(tok: int) -> bool:
    return TIME_OFFSET <= tok < TIME_OFFSET + STEPS_PER_MEASURE


def is_duration(tok: int) -> bool:
    return DURATION_OFFSET <= tok < DURATION_OFFSET + STEPS_PER_MEASURE


def token_class(tok: int) -> str:
    if is_pitch(tok):
        return "pitch"
    if is_time(tok):
        return "time"
    if is_duration(tok):
        return "duration"
    return {PAD: "pad", SOS: "sos", EOS: "eos"}.get(tok, "invalid")


def tokenize_measure(measure: TrackMeasure, max_notes: int = DEFAULT_MAX_NOTES) -> np.ndarray:
    """Encode one measure-track as a fixed-length id array of length ``3*max_notes + 2``.

    When the measure holds more than ``max_notes`` notes the lowest-pitched
    ones are dropped.
    """
    notes = measure.notes
    if len(notes) > max_notes:
        keep = sorted(notes, key=lambda n: (n.pitch, n.time, n.duration))[len(notes) - max_notes :]
        notes = tuple(sorted(keep))
    ids = np.full(seq_len(max_notes), PAD, dtype=np.int64)
    ids[0] = SOS
    pos = 1
    for n in notes:
        ids[pos : pos + 3] = (TIME_OFFSET + n.time, PITCH_OFFSET + n.pitch, DURATION_OFFSET + n.duration - 1)
        pos += 3
    ids[pos] = EOS
    return ids


@dataclass(frozen=True, slots=True)
class Detokenized:
    measure: TrackMeasure
    malformed: int  # tokens skipped because they did not start a valid triple
    terminated: bool  # an end-of-sequence token was found


def detokenize(ids: Sequence[int], role: TrackRole = TrackRole.BASS) -> Detokenized:
    """Lenient decoder for arbitrary id sequences, including raw model output."""
    ids = [int(t) for t in ids]
    i = 1 if ids and ids[0] == SOS else 0
    notes: list[NoteEvent] = []
    malformed = 0
    terminated = False
    while i < len(ids):
        tok = ids[i]
        if tok == EOS:
            terminated = True
            break
        if i + 2 < len(ids) and is_time(tok) and is_pitch(ids[i + 1]) and is_duration(ids[i + 2]):
            notes.append(
                NoteEvent(tok - TIME_OFFSET, ids[i + 1] - PITCH_OFFSET, ids[i + 2] - DURATION_OFFSET + 1)
            )
            i += 3
        else:
            malformed += 1
            i += 1
    return Detokenized(TrackMeasure(role, tuple(notes)), malformed, terminated)


def detokenize_measure(ids: Sequence[int], role: TrackRole = TrackRole.BASS) -> TrackMeasure:
    return detokenize(ids, role).measure


def check_token_seq(ids: Sequence[int]) -> None:
    """Raise ``ValueError`` unless ``ids`` is a well-formed token sequence."""
    ids = [int(t) for t in ids]
    if not ids or ids[0] != SOS:
        raise ValueError("sequence must start with SOS")
    if ids.count(EOS) != 1:
        raise ValueError("sequence must contain exactly one EOS")
    end = ids.index(EOS)
    if any(t != PAD for t in ids[end + 1 :]):
        raise ValueError("only padding may follow EOS")
    body = ids[1:end]
    if len(body) % 3:
        raise ValueError("note tokens do not form whole triples")
    for k in range(0, len(body), 3):
        t, p, d = body[k : k + 3]
        if not (is_time(t) and is_pitch(p) and is_duration(d)):
            raise ValueError(f"ill-formed triple {(t, p, d)} at position {k + 1}")


def song_to_tokens(song: GridSong, max_notes: int = DEFAULT_MAX_NOTES) -> np.ndarray:
    """Token grid of shape ``(n_measures, 4, L)``."""
    out = np.empty((song.n_measures, len(ROLES), seq_len(max_notes)), dtype=np.int64)
    for r in ROLES:
        for i, m in enumerate(song.tracks[r]):
            out[i, r] = tokenize_measure(m, max_notes)
    return out


def tokens_to_song(grid: np.ndarray) -> tuple[GridSong, int]:
    """Decode a ``(n_measures, 4, L)`` grid; also returns the malformed-token count."""
    grid = np.asarray(grid)
    malformed = 0
    tracks = []
    for r in ROLES:
        track = []
        for i in range(grid.shape[0]):
            d = detokenize(grid[i, r], r)
            malformed += d.malformed
            track.append(d.measure)
        tracks.append(tuple(track))
    return GridSong(tuple(tracks)), malformed
