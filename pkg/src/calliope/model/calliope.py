"""The hierarchical Transformer autoencoder and its latent discriminator.

Token grids have shape (B, N, M, L): batch, measures, tracks, tokens.

Encoding::

    h[i,t]  = Encoder_t(x[i,t])            per-track relative-attention Transformer
    z[i,t]  = Comp(h[i,t])                 masked mean over time, then linear
    z[i]    = BarCompressor(z[i,1..M])     concat over tracks, linear
    z       = SongCompressor(z[1..N])      concat over measures, linear, layer norm

Decoding mirrors it: SongDecompressor -> BarDecompressor -> Decomp (memory
slots) -> Decoder_t with causal self-attention and source attention.
"""

from __future__ import annotations

import numpy as np

from ..midi_token.tokens import EOS, PAD, SOS, VOCAB_SIZE
from ..numerics import Tensor, no_grad, ops
from .config import ModelConfig
from .layers import DecoderLayer, EncoderLayer, LayerNorm, Linear, Module, param


_ENCODER_GROUPS = ("enc", "comp", "barc", "songc")
_DECODER_GROUPS = ("songd", "bard", "dec")
GO = VOCAB_SIZE  # decoder start input; embedded but never predicted


class EncoderStack(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        # one extra row for the decoder-only start id
        self.embed = param(rng.normal(0.0, 1.0, size=(cfg.vocab + 1, cfg.d_model)))
        self._layers = []
        for k in range(cfg.n_layers):
            layer = EncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.seq_len, rng)
            setattr(self, f"layer{k}", layer)
            self._layers.append(layer)
        self.ln_f = LayerNorm(cfg.d_model)

    def __call__(self, ids: np.ndarray) -> Tensor:
        """(B, L) ids -> (B, L, d_model); pad keys are masked out of attention."""
        key_mask = ids != PAD
        x = ops.embedding(self.embed, ids)
        for layer in self._layers:
            x = layer(x, key_mask)
        return self.ln_f(x)


class DecoderStack(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.decomp = Linear(cfg.latent_dim, cfg.mem_len * cfg.d_model, rng)
        self._layers = []
        for k in range(cfg.n_layers):
            layer = DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.seq_len, rng)
            setattr(self, f"layer{k}", layer)
            self._layers.append(layer)
        self.ln_f = LayerNorm(cfg.d_model)
        # small init keeps untrained logits close to uniform
        self.out = Linear(cfg.d_model, cfg.vocab, rng, std=0.1 / np.sqrt(cfg.d_model))
        self._mem_shape = (cfg.mem_len, cfg.d_model)

    def memory(self, z_track: Tensor) -> Tensor:
        """(B, N_z) -> (B, L_mem, d_model)."""
        return ops.reshape(self.decomp(z_track), (z_track.shape[0],) + self._mem_shape)

    def __call__(self, embed: Tensor, inputs: np.ndarray, memory: Tensor) -> Tensor:
        x = ops.embedding(embed, inputs)
        for layer in self._layers:
            x = layer(x, memory)
        return self.out(self.ln_f(x))


class Discriminator(Module):
    """MLP on latent codes; outputs the probability a code came from the encoder."""

    def __init__(self, latent_dim: int, hidden: int, rng: np.random.Generator):
        self.l1 = Linear(latent_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(hidden, 1, rng)

    def logits(self, z: Tensor) -> Tensor:
        h = ops.gelu(self.l1(z))
        h = ops.gelu(self.l2(h))
        return ops.reshape(self.l3(h), (z.shape[0],))

    def __call__(self, z: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(z))


class SongCompressor(Module):
    """Concatenate the N measure codes, project to N_z, layer-normalise."""

    def __init__(self, n_measures: int, latent_dim: int, rng: np.random.Generator):
        self.lin = Linear(n_measures * latent_dim, latent_dim, rng)
        self.ln = LayerNorm(latent_dim)

    def __call__(self, z_bars: Tensor) -> Tensor:
        b, n, nz = z_bars.shape
        return self.ln(self.lin(ops.reshape(z_bars, (b, n * nz))))


class SongDecompressor(Module):
    """Repeat z once per measure, concatenate a learned measure embedding, project.

    ``concat(z, pos_i) @ w`` is evaluated as ``z @ w_top + pos_i @ w_bottom``.
    """

    def __init__(self, n_measures: int, latent_dim: int, rng: np.random.Generator):
        self.w = param(rng.normal(0.0, 1.0 / np.sqrt(2 * latent_dim), size=(2 * latent_dim, latent_dim)))
        self.b = param(np.zeros(latent_dim))
        self.pos = param(rng.normal(0.0, 1.0, size=(n_measures, latent_dim)))

    def __call__(self, z: Tensor) -> Tensor:
        nz = self.b.shape[0]
        from_code = ops.linear(z, ops.slice_axis(self.w, 0, nz, axis=0), self.b)
        from_pos = ops.matmul(self.pos, ops.slice_axis(self.w, nz, 2 * nz, axis=0))
        return ops.add(ops.reshape(from_code, (z.shape[0], 1, nz)), from_pos)


def shift_right(tokens: np.ndarray) -> np.ndarray:
    """Decoder inputs for teacher forcing: GO followed by the targets minus the last.

    GO is distinct from SOS so that positions 0 and 1 of the input differ;
    relative attention carries no absolute position to separate them.
    """
    out = np.empty_like(tokens)
    out[..., 0] = GO
    out[..., 1:] = tokens[..., :-1]
    return out


class Calliope(Module):
    def __init__(self, cfg: ModelConfig):
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        keys = cfg.track_keys
        nz = cfg.latent_dim
        self.enc = {k: EncoderStack(cfg, rng) for k in keys}
        self.comp = Linear(cfg.d_model, nz, rng)
        self.barc = Linear(cfg.n_tracks * nz, nz, rng)
        self.songc = SongCompressor(cfg.n_measures, nz, rng)
        self.songd = SongDecompressor(cfg.n_measures, nz, rng)
        self.bard = {k: Linear(nz // cfg.n_tracks, nz, rng) for k in keys}
        self.dec = {k: DecoderStack(cfg, rng) for k in keys}
        self.disc = Discriminator(nz, cfg.disc_hidden, rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    # parameter groups
    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.split(".")[0] in _ENCODER_GROUPS}

    def decoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.split(".")[0] in _DECODER_GROUPS}

    def autoencoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("disc.")}

    def disc_parameters(self) -> dict[str, Tensor]:
        return self.disc.named_parameters("disc.")

    def _check_grid(self, tokens: np.ndarray) -> None:
        cfg = self._cfg
        want = (cfg.n_measures, cfg.n_tracks, cfg.seq_len)
        if tokens.ndim != 4 or tokens.shape[1:] != want:
            raise ops.ShapeMismatch(f"token grid {tokens.shape} does not match (B,) + {want}")

    # encoder side
    def encode_measure_track(self, track: int, ids: np.ndarray) -> Tensor:
        """(B, L) ids of one track -> h of shape (B, L, d_model)."""
        return self.enc[self._cfg.track_keys[track]](np.asarray(ids))

    def comp_pool(self, h: Tensor, ids: np.ndarray) -> Tensor:
        """Masked mean over non-pad positions followed by a linear map: (B, L, d) -> (B, N_z)."""
        valid = (np.asarray(ids) != PAD).astype(h.dtype)
        counts = valid.sum(axis=-1, keepdims=True)
        if (counts == 0).any():
            raise ValueError("AllPad: a measure-track has no non-pad tokens")
        weights = Tensor((valid / counts)[:, None, :])
        pooled = ops.reshape(ops.matmul(weights, h), (h.shape[0], h.shape[2]))
        return self.comp(pooled)

    def bar_compress(self, z_tracks: list[Tensor]) -> Tensor:
        """M tensors (B', N_z) -> (B', N_z)."""
        return self.barc(ops.concat(z_tracks, axis=-1))

    def song_compress(self, z_bars: Tensor) -> Tensor:
        """(B, N, N_z) -> (B, N_z)."""
        return self.songc(z_bars)

    def encode_song(self, tokens: np.ndarray, return_intermediates: bool = False):
        """(B, N, M, L) token grid -> latent codes (B, N_z)."""
        tokens = np.asarray(tokens)
        self._check_grid(tokens)
        b, n, m, length = tokens.shape
        z_tracks = []
        for t in range(m):
            ids = tokens[:, :, t, :].reshape(b * n, length)
            z_tracks.append(self.comp_pool(self.encode_measure_track(t, ids), ids))
        z_bars = ops.reshape(self.bar_compress(z_tracks), (b, n, self._cfg.latent_dim))
        z = self.song_compress(z_bars)
        if return_intermediates:
            return z, {"z_track": z_tracks, "z_bar": z_bars}
        return z

    # decoder side
    def song_decompress(self, z: Tensor) -> Tensor:
        """(B, N_z) -> (B, N, N_z)."""
        return self.songd(z)

    def bar_decompress(self, z_bar: Tensor) -> list[Tensor]:
        """(B', N_z) -> M tensors (B', N_z), one projection per track."""
        parts = ops.split(z_bar, self._cfg.n_tracks, axis=-1)
        return [self.bard[k](p) for k, p in zip(self._cfg.track_keys, parts)]

    def memories(self, z: Tensor) -> list[Tensor]:
        """Per-track decoder memories, each (B*N, L_mem, d_model)."""
        cfg = self._cfg
        z_bars = self.song_decompress(z)
        flat = ops.reshape(z_bars, (z.shape[0] * cfg.n_measures, cfg.latent_dim))
        z_tracks = self.bar_decompress(flat)
        return [self.dec[k].memory(zt) for k, zt in zip(cfg.track_keys, z_tracks)]

    def decode_measure_track(self, track: int, memory: Tensor, inputs: np.ndarray) -> Tensor:
        """Logits (B', L, vocab) for decoder ``inputs`` (B', L) given memory (B', L_mem, d)."""
        key = self._cfg.track_keys[track]
        return self.dec[key](self.enc[key].embed, np.asarray(inputs), memory)

    def teacher_forced_logits(self, tokens: np.ndarray, z: Tensor | None = None, inputs: np.ndarray | None = None) -> list[Tensor]:
        """Per-track logits (B*N, L, vocab). ``inputs`` overrides shifted-right gold inputs."""
        tokens = np.asarray(tokens)
        self._check_grid(tokens)
        b, n, m, length = tokens.shape
        if z is None:
            z = self.encode_song(tokens)
        if inputs is None:
            inputs = shift_right(tokens)
        mems = self.memories(z)
        return [
            self.decode_measure_track(t, mems[t], inputs[:, :, t, :].reshape(b * n, length))
            for t in range(m)
        ]

    def decode_song(self, z: Tensor, rng: np.random.Generator | None = None) -> np.ndarray:
        """Autoregressive decoding from codes (B, N_z) to a token grid (B, N, M, L).

        Each measure-track starts with SOS (the decoder is fed GO, then SOS)
        and stops at EOS or after L tokens; positions after EOS are padding.
        """
        cfg = self._cfg
        b = z.shape[0]
        rows = b * cfg.n_measures
        out = np.full((rows, cfg.n_tracks, cfg.seq_len), PAD, dtype=np.int64)
        with no_grad():
            mems = self.memories(z)
            for t in range(cfg.n_tracks):
                inputs = np.full((rows, cfg.seq_len), PAD, dtype=np.int64)
                inputs[:, 0] = GO
                out[:, t, 0] = SOS
                if cfg.seq_len > 1:
                    inputs[:, 1] = SOS
                done = np.zeros(rows, dtype=bool)
                for p in range(1, cfg.seq_len):
                    logits = self.decode_measure_track(t, mems[t], inputs[:, : p + 1]).data[:, p]
                    tok = self._pick(logits, rng)
                    tok = np.where(done, PAD, tok)
                    out[:, t, p] = tok
                    done |= tok == EOS
                    if done.all():
                        break
                    if p + 1 < cfg.seq_len:
                        inputs[:, p + 1] = tok
        return out.reshape(b, cfg.n_measures, cfg.n_tracks, cfg.seq_len)

    def _pick(self, logits: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        temp = self._cfg.temperature
        if temp == 0 or rng is None:
            return logits.argmax(axis=-1)
        z = logits.astype(np.float64) / temp
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random((p.shape[0], 1))
        return np.minimum((p.cumsum(axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)

    def discriminate(self, z: Tensor) -> Tensor:
        return self.disc(z)

    # persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = [k for k in params if k not in entries]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(entries[k])
            if arr.shape != p.shape:
                raise ops.ShapeMismatch(f"{k}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
