"""MIDI ingestion, grid quantization, and the measure-level token vocabulary."""

from .corpus import CorpusError, corpus_digest, read_corpus, write_corpus
from .grid import (
    N_TRACKS,
    ROLES,
    STEPS_PER_MEASURE,
    GridSong,
    NoteEvent,
    TrackMeasure,
    TrackRole,
    concat_songs,
    route_instrument,
)
from .smf import (
    EmptyAfterQuantize,
    MalformedHeader,
    MidiError,
    MidiSongRaw,
    RawNote,
    TruncatedChunk,
    UnsupportedFormat,
    UnsupportedMeter,
    parse_smf,
    quantize,
    write_smf,
)
from .tokens import (
    DEFAULT_MAX_NOTES,
    EOS,
    PAD,
    SOS,
    VOCAB_SIZE,
    Detokenized,
    check_token_seq,
    detokenize,
    detokenize_measure,
    max_notes_for,
    seq_len,
    song_to_tokens,
    token_class,
    tokenize_measure,
    tokens_to_song,
)

__all__ = [
    "CorpusError",
    "DEFAULT_MAX_NOTES",
    "Detokenized",
    "EOS",
    "EmptyAfterQuantize",
    "GridSong",
    "MalformedHeader",
    "MidiError",
    "MidiSongRaw",
    "N_TRACKS",
    "NoteEvent",
    "PAD",
    "ROLES",
    "RawNote",
    "SOS",
    "STEPS_PER_MEASURE",
    "TrackMeasure",
    "TrackRole",
    "TruncatedChunk",
    "UnsupportedFormat",
    "UnsupportedMeter",
    "VOCAB_SIZE",
    "check_token_seq",
    "concat_songs",
    "corpus_digest",
    "detokenize",
    "detokenize_measure",
    "max_notes_for",
    "parse_smf",
    "quantize",
    "read_corpus",
    "route_instrument",
    "seq_len",
    "song_to_tokens",
    "token_class",
    "tokenize_measure",
    "tokens_to_song",
    "write_corpus",
    "write_smf",
]
