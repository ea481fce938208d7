"""The hierarchical Transformer autoencoder with a single song-level latent code."""

from .calliope import GO, Calliope, Discriminator, shift_right
from .config import ConfigError, DivisibilityError, ModelConfig, tiny_config
from .layers import Module, rel_attention, relative_index

__all__ = [
    "Calliope",
    "ConfigError",
    "Discriminator",
    "DivisibilityError",
    "ModelConfig",
    "Module",
    "rel_attention",
    "relative_index",
    "shift_right",
    "GO",
    "tiny_config",
]
