from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from ..midi_token.grid import ROLES
from ..midi_token.tokens import VOCAB_SIZE, seq_len


class ConfigError(ValueError):
    pass


class DivisibilityError(ConfigError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 512
    latent_dim: int = 256
    n_measures: int = 1
    n_tracks: int = 4
    seq_len: int = seq_len(24)
    vocab: int = VOCAB_SIZE
    mem_len: int = 8
    disc_hidden: int = 512
    temperature: float = 0.0  # 0 means greedy decoding
    seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name in ("temperature", "seed"):
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive")
        if self.d_model % self.n_heads:
            raise DivisibilityError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.latent_dim % self.n_tracks:
            raise DivisibilityError(
                f"latent_dim {self.latent_dim} not divisible by n_tracks {self.n_tracks}"
            )
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def track_keys(self) -> tuple[str, ...]:
        return tuple(
            ROLES[t].key if t < len(ROLES) else f"track{t}" for t in range(self.n_tracks)
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def tiny_config(**overrides) -> ModelConfig:
    """Reduced model used for desk-scale runs and tests."""
    base = dict(d_model=32, n_layers=2, n_heads=2, d_ff=64, latent_dim=32, seq_len=38, mem_len=8, disc_hidden=64)
    base.update(overrides)
    return ModelConfig(**base)
