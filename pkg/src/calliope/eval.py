"""Reconstruction accuracy and generation metrics (EB, UPC, QN, DP)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .midi_token.grid import ROLES, GridSong, TrackRole
from .midi_token.tokens import PAD, tokens_to_song
from .model import Calliope
from .numerics import Tensor, no_grad

MELODIC_ROLES = (TrackRole.BASS, TrackRole.GUITAR_PIANO, TrackRole.STRINGS)
QUALIFIED_MIN_STEPS = 3
DRUM_GRID_STEPS = 6  # 16th notes on a 96-step 4/4 bar; the 8th-note grid is a subset


@dataclass
class AccuracyReport:
    """Micro-averaged token accuracy, per track and overall."""

    correct: dict[str, int] = field(default_factory=dict)
    total: dict[str, int] = field(default_factory=dict)

    def add(self, key: str, correct: int, total: int) -> None:
        self.correct[key] = self.correct.get(key, 0) + int(correct)
        self.total[key] = self.total.get(key, 0) + int(total)

    @property
    def per_track(self) -> dict[str, float | None]:
        return {k: (self.correct[k] / self.total[k] if self.total[k] else None) for k in self.total}

    @property
    def overall(self) -> float:
        total = sum(self.total.values())
        return sum(self.correct.values()) / total if total else 0.0

    def as_dict(self) -> dict:
        return {**self.per_track, "all": self.overall}


def _batches(tokens: np.ndarray, size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(tokens), size):
        yield tokens[start : start + size]


def accuracy_next(model: Calliope, songs: np.ndarray, batch_size: int = 32) -> AccuracyReport:
    """Teacher-forced next-token accuracy over non-pad target positions."""
    songs = np.asarray(songs)
    keys = model.config.track_keys
    report = AccuracyReport()
    with no_grad():
        for batch in _batches(songs, batch_size):
            logits = model.teacher_forced_logits(batch)
            b, n, m, length = batch.shape
            for t in range(m):
                gold = batch[:, :, t, :].reshape(b * n, length)
                valid = gold != PAD
                hit = (logits[t].data.argmax(axis=-1) == gold) & valid
                report.add(keys[t], hit.sum(), valid.sum())
    return report


def accuracy_seq(model: Calliope, songs: np.ndarray, batch_size: int = 32) -> tuple[AccuracyReport, np.ndarray]:
    """Autoregressive reconstruction accuracy from each song's own latent code.

    Emitted ids are compared position-wise with the gold sequence up to the
    gold non-pad length. Also returns the decoded token grids.
    """
    songs = np.asarray(songs)
    keys = model.config.track_keys
    report = AccuracyReport()
    decoded = []
    with no_grad():
        for batch in _batches(songs, batch_size):
            out = model.decode_song(model.encode_song(batch))
            decoded.append(out)
            for t in range(batch.shape[2]):
                gold = batch[:, :, t, :]
                valid = gold != PAD
                report.add(keys[t], ((out[:, :, t, :] == gold) & valid).sum(), valid.sum())
    if decoded:
        grids = np.concatenate(decoded)
    else:
        grids = np.zeros((0,) + songs.shape[1:], dtype=np.int64)
    return report, grids


def _role_key(role: TrackRole) -> str:
    return role.key


def metric_eb(songs: Sequence[GridSong]) -> dict[str, float | None]:
    """Per track: fraction of measures without any note."""
    out = {}
    for role in ROLES:
        empty = total = 0
        for song in songs:
            track = song.tracks[role]
            total += len(track)
            empty += sum(1 for m in track if m.is_empty)
        out[_role_key(role)] = empty / total if total else None
    return out


def metric_upc(songs: Sequence[GridSong]) -> dict[str, float | None]:
    """Per melodic track: mean count of distinct pitch classes over non-empty bars."""
    out = {}
    for role in MELODIC_ROLES:
        classes = bars = 0
        for song in songs:
            for m in song.tracks[role]:
                if m.notes:
                    classes += len({n.pitch % 12 for n in m.notes})
                    bars += 1
        out[_role_key(role)] = classes / bars if bars else None
    return out


def metric_qn(songs: Sequence[GridSong]) -> dict[str, float | None]:
    """Per melodic track: fraction of notes lasting at least three steps."""
    out = {}
    for role in MELODIC_ROLES:
        durations = np.array(
            [n.duration for song in songs for m in song.tracks[role] for n in m.notes], dtype=np.int64
        )
        out[_role_key(role)] = int((durations >= QUALIFIED_MIN_STEPS).sum()) / len(durations) if len(durations) else None
    return out


def metric_dp(songs: Sequence[GridSong]) -> float | None:
    """Fraction of drum onsets on the 16th-note grid."""
    onsets = np.array(
        [n.time for song in songs for m in song.tracks[TrackRole.DRUMS] for n in m.notes], dtype=np.int64
    )
    if not len(onsets):
        return None
    return int((onsets % DRUM_GRID_STEPS == 0).sum()) / len(onsets)


def generate(model: Calliope, count: int, seed: int, batch_size: int = 64) -> list[GridSong]:
    """Decode ``count`` codes drawn from the standard normal prior."""
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    codes = rng.standard_normal((count, model.config.latent_dim))
    dtype = model.comp.w.dtype
    songs = []
    for start in range(0, count, batch_size):
        z = Tensor(codes[start : start + batch_size].astype(dtype))
        grids = model.decode_song(z, rng=rng)
        songs.extend(tokens_to_song(g)[0] for g in grids)
    return songs


def build_report(
    songs: Sequence[GridSong],
    seq_acc: AccuracyReport | None = None,
    next_acc: AccuracyReport | None = None,
) -> dict:
    return {
        "eb": metric_eb(songs),
        "upc": metric_upc(songs),
        "qn": metric_qn(songs),
        "dp": metric_dp(songs),
        "seq_acc": None if seq_acc is None else seq_acc.as_dict(),
        "next_acc": None if next_acc is None else next_acc.as_dict(),
        "n_songs": len(songs),
        "accuracy_unit": "token",
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
