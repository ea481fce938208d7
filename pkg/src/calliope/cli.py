"""Command-line entry point: ``calliope {tokenize,train,generate,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .eval import accuracy_next, accuracy_seq, build_report, dump_report, generate
from .midi_token import (
    MidiError,
    UnsupportedMeter,
    corpus_digest,
    parse_smf,
    quantize,
    read_corpus,
    song_to_tokens,
    tokens_to_song,
    write_corpus,
    write_smf,
)
from .midi_token.corpus import CorpusError
from .model import ModelConfig
from .model.config import ConfigError
from .numerics import checkpoint
from .training import NonFiniteLoss, TooFewSongs, Trainer, format_config, load_model, parse_config, split_dataset

MIDI_SUFFIXES = {".mid", ".midi"}


class BarsMismatch(ValueError):
    pass


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_tokenize(args: argparse.Namespace) -> int:
    src = Path(args.in_dir)
    if not src.is_dir():
        return _fail(f"{src} is not a directory")
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)
    stride = args.stride or args.bars
    records = []
    skipped: Counter[str] = Counter()
    kept = dropped_notes = malformed = 0
    for path in files:
        try:
            song = quantize(parse_smf(path.read_bytes()))
        except UnsupportedMeter:
            skipped["meter"] += 1
            continue
        except MidiError as err:
            skipped[type(err).__name__] += 1
            continue
        windows = range(0, song.n_measures - args.bars + 1, stride)
        if not windows:
            skipped["too_short"] += 1
            continue
        kept += 1
        for start in windows:
            grid = song_to_tokens(song.window(start, args.bars), args.max_notes)
            decoded, bad = tokens_to_song(grid)
            malformed += bad
            dropped_notes += sum(
                len(m) for t in song.window(start, args.bars).tracks for m in t
            ) - sum(len(m) for t in decoded.tracks for m in t)
            records.append(grid)
    print(
        f"files={len(files)} kept={kept} skipped={sum(skipped.values())} "
        + " ".join(f"skipped_{k}={v}" for k, v in sorted(skipped.items()))
    )
    print(f"records={len(records)} dropped_notes={dropped_notes} malformed_tokens={malformed}")
    if not records:
        return _fail("no records produced")
    write_corpus(args.out, records)
    return 0


def _load_corpus(path: str) -> np.ndarray:
    records = read_corpus(path)
    if not records:
        raise CorpusError(f"{path} holds no records")
    shapes = {r.shape for r in records}
    if len(shapes) != 1:
        raise CorpusError(f"{path} mixes record shapes {sorted(shapes)}")
    # stored measure-major/track-major: (N, M, L) per record
    return np.stack(records)


def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg, model_kw = parse_config(Path(args.config).read_text())
    except (OSError, ConfigError) as err:
        return _fail(f"bad config: {err}")
    try:
        corpus = _load_corpus(args.corpus)
    except (OSError, CorpusError) as err:
        return _fail(f"cannot read corpus: {err}")
    _, n_measures, n_tracks, length = corpus.shape
    model_kw.update(n_measures=n_measures, n_tracks=n_tracks, seq_len=length)
    try:
        model_cfg = ModelConfig(**model_kw)
        train_ids, valid_ids, _ = split_dataset(range(len(corpus)), cfg.seed, cfg.split)
    except (ConfigError, TooFewSongs) as err:
        return _fail(str(err))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": format_config(cfg, model_cfg),
        "seed": cfg.seed,
        "corpus_sha256": corpus_digest(args.corpus),
        "checkpoint": str(out / "final.cllp"),
        "tool_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    from .model import Calliope

    trainer = Trainer(Calliope(model_cfg), cfg, corpus[train_ids], corpus[valid_ids], out)
    try:
        trainer.fit()
    except NonFiniteLoss as err:
        return _fail(f"{err} (last good checkpoint: {err.last_checkpoint})", code=2)
    print(f"trained {trainer.step} steps; checkpoint {out / 'final.cllp'}")
    return 0


def _load_checkpoint_model(path: str):
    try:
        return load_model(checkpoint.load(path))
    except (OSError, checkpoint.CheckpointError, KeyError, ValueError) as err:
        raise checkpoint.CheckpointError(f"cannot load {path}: {err}") from err


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        model = _load_checkpoint_model(args.checkpoint)
    except checkpoint.CheckpointError as err:
        return _fail(str(err))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    songs = generate(model, args.count, args.seed)
    for i, song in enumerate(songs):
        (out / f"gen_{i:05d}.mid").write_bytes(write_smf(song))
    (out / "report.json").write_text(dump_report(build_report(songs)))
    print(f"wrote {len(songs)} songs to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        model = _load_checkpoint_model(args.checkpoint)
    except checkpoint.CheckpointError as err:
        return _fail(str(err))
    try:
        corpus = _load_corpus(args.corpus)
    except (OSError, CorpusError) as err:
        return _fail(f"cannot read corpus: {err}")
    cfg = model.config
    if corpus.shape[1] != cfg.n_measures:
        return _fail(str(BarsMismatch(f"corpus has {corpus.shape[1]} bars, model expects {cfg.n_measures}")))
    if corpus.shape[2:] != (cfg.n_tracks, cfg.seq_len):
        return _fail(f"corpus records {corpus.shape[1:]} do not fit model sequence length {cfg.seq_len}")
    next_acc = accuracy_next(model, corpus)
    seq_acc, grids = accuracy_seq(model, corpus)
    songs = [tokens_to_song(g)[0] for g in grids]
    Path(args.out).write_text(dump_report(build_report(songs, seq_acc, next_acc)))
    print(f"next_acc={next_acc.overall:.4f} seq_acc={seq_acc.overall:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calliope", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="turn a directory of MIDI files into a token corpus")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bars", type=int, choices=(1, 2, 16), required=True)
    p.add_argument("--stride", type=int, default=None, help="window stride in bars (default: --bars)")
    p.add_argument("--max-notes", type=int, default=24, help="notes kept per measure-track")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train a model on a token corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode songs from prior samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="reconstruction accuracy and metrics on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
