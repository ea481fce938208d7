"""Two-phase adversarial autoencoder training.

Each step runs the reconstruction phase (token cross-entropy under two-pass
scheduled sampling) and, once the KL weight is positive, the regularization
phase: one discriminator update separating posterior codes from prior draws,
then one encoder update on the density-ratio KL estimate.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .midi_token.tokens import PAD
from .model import Calliope, ModelConfig, shift_right
from .model.config import ConfigError
from .numerics import (
    Adam,
    NonFiniteValue,
    Tape,
    Tensor,
    checkpoint,
    clip_grad_norm,
    no_grad,
    ops,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "recon_loss", "disc_loss", "enc_adv_loss", "beta", "valid_next_acc", "wall_ms")


class TooFewSongs(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 20
    tf_prob: float = 0.5
    ss_K: int = 1
    beta_max: float = 0.1
    beta_start_step: int = 50_000
    beta_ramp_steps: int = 10_000
    total_steps: int = 100_000
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    checkpoint_every: int = 1000
    valid_every: int = 500
    clip_norm: float = 1.0
    adv_loss: str = "density_ratio"  # or "single_term"
    disc_warmup: int = 0  # 1: train the discriminator (step A only) while beta is still 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tf_prob <= 1.0:
            raise ConfigError("tf_prob must lie in [0, 1]")
        if self.beta_max < 0:
            raise ConfigError("beta_max must be >= 0")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        if self.ss_K != 1:
            raise ConfigError("only ss_K = 1 (a constant teacher-forcing probability) is supported")
        if self.adv_loss not in ("density_ratio", "single_term"):
            raise ConfigError(f"unknown adv_loss {self.adv_loss!r}")
        if self.disc_warmup not in (0, 1):
            raise ConfigError("disc_warmup must be 0 or 1")
        if self.batch_size < 1 or self.total_steps < 0 or self.beta_ramp_steps < 0:
            raise ConfigError("batch_size must be positive, step counts non-negative")


def _coerce(text: str, kind):
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in (str, "str"):
        return text
    if "tuple" in str(kind):
        return tuple(float(x) for x in text.replace("/", ",").split(","))
    raise ConfigError(f"cannot parse {text!r}")


def parse_config(text: str) -> tuple[TrainConfig, dict]:
    """Parse ``key = value`` lines into a :class:`TrainConfig` and model overrides.

    Model hyperparameters use a ``model.`` prefix (``model.d_model = 32``).
    Blank lines and ``#`` comments are ignored; unknown keys are rejected.
    """
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    train_kw: dict = {}
    model_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            model_kw[name] = _coerce(value, model_types[name])
        elif key in train_types:
            train_kw[key] = _coerce(value, train_types[key])
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(**train_kw), model_kw


def format_config(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{f.name} = {value}")
    if model_cfg is not None:
        for f in fields(model_cfg):
            lines.append(f"model.{f.name} = {getattr(model_cfg, f.name)}")
    return "\n".join(lines) + "\n"


def split_dataset(ids: Sequence, seed: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[list, list, list]:
    """Shuffle deterministically and cut into train/valid/test parts."""
    ids = list(ids)
    if len(ids) < 10:
        raise TooFewSongs(f"need at least 10 songs to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_valid = int(np.floor(n * fractions[1] + 0.5))
    n_test = int(np.floor(n * fractions[2] + 0.5))
    n_train = n - n_valid - n_test
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]


def beta_schedule(step: int, start: int, ramp: int, beta_max: float) -> float:
    """Zero before ``start``, linear up to ``beta_max`` over ``ramp`` steps, then flat."""
    if step < start:
        return 0.0
    if ramp == 0 or step >= start + ramp:
        return beta_max
    return beta_max * (step - start) / ramp


def _track_targets(tokens: np.ndarray, t: int) -> np.ndarray:
    b, n, _, length = tokens.shape
    return tokens[:, :, t, :].reshape(b * n, length)


def scheduled_inputs(
    model: Calliope, tokens: np.ndarray, memories: list[Tensor], tf_prob: float, rng: np.random.Generator
) -> np.ndarray:
    """Decoder inputs for the second pass of scheduled sampling.

    Every position after the start token independently keeps the gold token
    with probability ``tf_prob``, otherwise takes the first pass's argmax
    prediction for the preceding position.
    """
    gold = shift_right(tokens)
    if tf_prob >= 1.0:
        return gold
    b, n, m, length = tokens.shape
    preds = np.empty_like(tokens)
    with no_grad():
        for t in range(m):
            logits = model.decode_measure_track(t, memories[t], _track_targets(gold, t))
            preds[:, :, t, :] = logits.data.argmax(axis=-1).reshape(b, n, length)
    keep = rng.random(tokens.shape) < tf_prob
    keep[..., 0] = True
    return np.where(keep, gold, shift_right(preds))


def reconstruction_loss(
    model: Calliope,
    tokens: np.ndarray,
    tf_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean token cross-entropy over every non-pad position of the batch."""
    tokens = np.asarray(tokens)
    z = model.encode_song(tokens)
    memories = model.memories(z)
    if tf_prob < 1.0:
        if rng is None:
            raise ValueError("scheduled sampling needs a random generator")
        inputs = scheduled_inputs(model, tokens, memories, tf_prob, rng)
    else:
        inputs = shift_right(tokens)
    total = None
    for t in range(tokens.shape[2]):
        logits = model.decode_measure_track(t, memories[t], _track_targets(inputs, t))
        part = ops.cross_entropy(logits, _track_targets(tokens, t), reduction="sum")
        total = part if total is None else ops.add(total, part)
    count = int((tokens != PAD).sum())
    return ops.scale(total, 1.0 / max(count, 1))


def density_ratio_kl(logits: Tensor) -> Tensor:
    """``mean(log d - log(1 - d))`` for discriminator logits; estimates KL(q || p)."""
    return ops.mean(ops.sub(ops.log_sigmoid(logits), ops.log_sigmoid(ops.scale(logits, -1.0))))


def discriminator_loss(model: Calliope, z_post: Tensor, z_prior: Tensor) -> Tensor:
    """Negated ``E_q[log d(z)] + E_p[log(1 - d(z))]``: posterior labelled 1, prior 0."""
    real = ops.mean(ops.log_sigmoid(model.disc.logits(z_post)))
    fake = ops.mean(ops.log_sigmoid(ops.scale(model.disc.logits(z_prior), -1.0)))
    return ops.scale(ops.add(real, fake), -1.0)


def encoder_adversarial_loss(model: Calliope, z_post: Tensor, beta: float, mode: str = "density_ratio") -> Tensor:
    logits = model.disc.logits(z_post)
    if mode == "density_ratio":
        term = density_ratio_kl(logits)
    else:
        term = ops.mean(ops.log_sigmoid(logits))
    return ops.scale(term, beta)


def _rng_state(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array(
        [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]], dtype=np.uint64
    )


def _set_rng_state(rng: np.random.Generator, arr: np.ndarray) -> None:
    a = [int(x) for x in arr]
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (a[0] << 64) | a[1], "inc": (a[2] << 64) | a[3]},
        "has_uint32": a[4],
        "uinteger": a[5],
    }


def _text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def _entry_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


def load_model(entries: dict[str, np.ndarray]) -> Calliope:
    model = Calliope(ModelConfig.from_json(_entry_text(entries["meta.model_config"])))
    model.load_state_dict(entries)
    return model


class Trainer:
    """Owns the model, both optimizers, the seeded generator, and the step counter."""

    def __init__(
        self,
        model: Calliope,
        cfg: TrainConfig,
        train: np.ndarray,
        valid: np.ndarray | None = None,
        out_dir: str | os.PathLike | None = None,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.train = np.asarray(train)
        self.valid = None if valid is None or len(valid) == 0 else np.asarray(valid)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(cfg.seed)
        # prior draws get their own stream so that regularization never shifts the batch order
        self.prior_rng = np.random.default_rng([cfg.seed, 1])
        self.ae_params = model.autoencoder_parameters()
        self.enc_params = model.encoder_parameters()
        self.disc_params = model.disc_parameters()
        self.opt_ae = Adam(self.ae_params, lr=cfg.lr)
        self.opt_disc = Adam(self.disc_params, lr=cfg.lr)
        self.step = 0
        self.last_checkpoint: str | None = None
        self.history: list[dict] = []

    # data
    def sample_batch(self) -> np.ndarray:
        n = len(self.train)
        if self.cfg.batch_size >= n:
            return self.train
        return self.train[self.rng.choice(n, size=self.cfg.batch_size, replace=False)]

    def beta(self, step: int | None = None) -> float:
        c = self.cfg
        return beta_schedule(self.step if step is None else step, c.beta_start_step, c.beta_ramp_steps, c.beta_max)

    # phases
    def reconstruction_phase(self, batch: np.ndarray) -> float:
        for p in self.disc_params.values():
            p.grad = None
        with Tape() as tape:
            loss = reconstruction_loss(self.model, batch, self.cfg.tf_prob, self.rng)
            tape.backward(loss, self.ae_params.values())
        self._apply(self.opt_ae, self.ae_params, "reconstruction")
        return loss.item()

    def discriminator_step(self, batch: np.ndarray) -> float:
        """Step A: one discriminator update, posterior codes against prior draws."""
        model = self.model
        with no_grad():
            z_post = Tensor(model.encode_song(batch).data)
        z_prior = Tensor(self.prior_rng.standard_normal(z_post.shape).astype(z_post.dtype))
        for p in self.ae_params.values():
            p.grad = None
        with Tape() as tape:
            d_loss = discriminator_loss(model, z_post, z_prior)
            tape.backward(d_loss, self.disc_params.values())
        self._apply(self.opt_disc, self.disc_params, "discriminator")
        return d_loss.item()

    def encoder_step(self, batch: np.ndarray, beta: float) -> float:
        """Step B: one encoder update on the adversarial loss, discriminator frozen."""
        for p in self.disc_params.values():
            p.requires_grad = False
            p.grad = None
        try:
            for p in self.ae_params.values():
                p.grad = None
            with Tape() as tape:
                e_loss = encoder_adversarial_loss(self.model, self.model.encode_song(batch), beta, self.cfg.adv_loss)
                tape.backward(e_loss, self.enc_params.values())
            self._apply(self.opt_ae, self.enc_params, "encoder-adversarial")
        finally:
            for p in self.disc_params.values():
                p.requires_grad = True
        return e_loss.item()

    def regularization_phase(self, batch: np.ndarray, beta: float) -> tuple[float, float]:
        return self.discriminator_step(batch), self.encoder_step(batch, beta)

    def _apply(self, opt: Adam, params: dict[str, Tensor], phase: str) -> None:
        norm, clipped = clip_grad_norm(params, self.cfg.clip_norm)
        if not np.isfinite(norm):
            raise NonFiniteLoss(f"non-finite gradient in {phase} phase at step {self.step}", self.last_checkpoint)
        if clipped:
            log.debug("step %d %s: clipped gradient norm %.4g", self.step, phase, norm)
        opt.step()

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        batch = self.sample_batch()
        beta = self.beta()
        try:
            recon = self.reconstruction_phase(batch)
            disc_loss = enc_loss = float("nan")
            if beta > 0:
                disc_loss, enc_loss = self.regularization_phase(batch, beta)
            elif self.cfg.disc_warmup:
                disc_loss = self.discriminator_step(batch)
        except NonFiniteValue as err:
            raise NonFiniteLoss(f"step {self.step}: {err}", self.last_checkpoint) from err
        if not np.isfinite(recon):
            raise NonFiniteLoss(f"step {self.step}: reconstruction loss is {recon}", self.last_checkpoint)
        self.step += 1
        row = {
            "step": self.step,
            "recon_loss": recon,
            "disc_loss": disc_loss,
            "enc_adv_loss": enc_loss,
            "beta": beta,
            "valid_next_acc": None,
        }
        if self.valid is not None and self.cfg.valid_every and self.step % self.cfg.valid_every == 0:
            row["valid_next_acc"] = self.validate()
        row["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        return row

    def validate(self) -> float:
        from .eval import accuracy_next

        return accuracy_next(self.model, self.valid).overall

    def fit(self, steps: int | None = None, callback=None) -> list[dict]:
        """Run until ``total_steps`` (or ``steps`` more steps); returns the logged rows."""
        target = self.cfg.total_steps if steps is None else self.step + steps
        rows = []
        while self.step < target:
            row = self.train_step()
            rows.append(row)
            self.history.append(row)
            self._log_row(row)
            if callback is not None:
                callback(self, row)
            every = self.cfg.checkpoint_every
            if self.out_dir is not None and every and self.step % every == 0:
                self.save(self.out_dir / f"step_{self.step:07d}.cllp")
        if self.out_dir is not None:
            self.save(self.out_dir / "final.cllp")
        return rows

    def _log_row(self, row: dict) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(METRIC_COLUMNS)
            w.writerow(["" if row[c] is None else row[c] for c in METRIC_COLUMNS])

    # persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        entries = {
            "meta.model_config": _text_entry(self.model.config.to_json()),
            "meta.train_config": _text_entry(json.dumps(dataclasses.asdict(self.cfg), sort_keys=True)),
            "train.step": np.array([self.step], dtype=np.int64),
            "train.rng": _rng_state(self.rng),
            "train.prior_rng": _rng_state(self.prior_rng),
        }
        entries.update(self.model.state_dict())
        entries.update(self.opt_ae.state_dict("opt.ae"))
        entries.update(self.opt_disc.state_dict("opt.disc"))
        return entries

    def save(self, path: str | os.PathLike) -> str:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, self.state_dict())
        self.last_checkpoint = os.fspath(path)
        return self.last_checkpoint

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict(entries)
        self.opt_ae.load_state_dict(entries, "opt.ae")
        self.opt_disc.load_state_dict(entries, "opt.disc")
        self.step = int(entries["train.step"][0])
        _set_rng_state(self.rng, entries["train.rng"])
        _set_rng_state(self.prior_rng, entries["train.prior_rng"])

    @classmethod
    def from_checkpoint(
        cls, path: str | os.PathLike, train: np.ndarray, valid: np.ndarray | None = None, out_dir=None
    ) -> "Trainer":
        entries = checkpoint.load(path)
        cfg_dict = json.loads(_entry_text(entries["meta.train_config"]))
        cfg_dict["split"] = tuple(cfg_dict["split"])
        trainer = cls(load_model(entries), TrainConfig(**cfg_dict), train, valid, out_dir)
        trainer.load_state(entries)
        trainer.last_checkpoint = os.fspath(path)
        return trainer


def train_loop(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train: np.ndarray,
    valid: np.ndarray | None = None,
    out_dir: str | os.PathLike | None = None,
) -> Trainer:
    trainer = Trainer(Calliope(model_cfg), cfg, train, valid, out_dir)
    trainer.fit()
    return trainer
