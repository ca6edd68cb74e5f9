"""Per-source overcomplete autoencoder projectors.

The encoder lifts a d_e-dimensional source embedding into the model's
d_t-dimensional token space with a tanh layer, t = tanh(W_enc e + b_enc);
the decoder maps back affinely, e_hat = W_dec t + b_dec. Overcompleteness
(d_t > d_e) is enforced at construction. These are the only trainable
parameters in the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from . import autodiff as ad

__all__ = ["ProjectorConfig", "ProjectorParams", "init_projector", "project", "reconstruct"]

PARAM_NAMES = ("enc_w", "enc_b", "dec_w", "dec_b")


@dataclass(frozen=True)
class ProjectorConfig:
    embed_dim: int
    token_dim: int

    def __post_init__(self):
        if self.embed_dim <= 0 or self.token_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.token_dim <= self.embed_dim:
            raise ValueError(
                f"projector must be overcomplete: token_dim {self.token_dim} "
                f"must exceed embed_dim {self.embed_dim}")


class ProjectorParams:
    """Config plus the four named tensors in a ParamSet."""

    def __init__(self, config: ProjectorConfig, enc_w, enc_b, dec_w, dec_b):
        self.config = config
        self.params = ad.ParamSet()
        shapes = {
            "enc_w": (config.token_dim, config.embed_dim),
            "enc_b": (config.token_dim,),
            "dec_w": (config.embed_dim, config.token_dim),
            "dec_b": (config.embed_dim,),
        }
        given = {"enc_w": enc_w, "enc_b": enc_b, "dec_w": dec_w, "dec_b": dec_b}
        for name in PARAM_NAMES:
            arr = np.asarray(given[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} must have shape {shapes[name]}, got {arr.shape}")
            self.params.add(name, arr)

    def tensor(self, name: str) -> ad.Tensor:
        return self.params[name]

    def value(self, name: str) -> np.ndarray:
        return self.params.value(name)


def init_projector(config: ProjectorConfig, seed: int, source_key: int | str = 0) -> ProjectorParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    gen = seeding.rng(seed, "projector", source_key)
    enc_bound = 1.0 / np.sqrt(config.embed_dim)
    dec_bound = 1.0 / np.sqrt(config.token_dim)
    return ProjectorParams(
        config,
        enc_w=gen.uniform(-enc_bound, enc_bound, size=(config.token_dim, config.embed_dim)),
        enc_b=np.zeros(config.token_dim),
        dec_w=gen.uniform(-dec_bound, dec_bound, size=(config.embed_dim, config.token_dim)),
        dec_b=np.zeros(config.embed_dim),
    )


def _rows(x, dim: int, what: str) -> tuple[ad.Tensor, bool]:
    t = x if isinstance(x, ad.Tensor) else ad.constant(x)
    single = t.ndim == 1
    if single:
        t = t.reshape(1, t.shape[0])
    if t.ndim != 2 or t.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} columns, got shape {x.shape}")
    return t, single


def project(pp: ProjectorParams, e) -> ad.Tensor:
    """tanh(W_enc e + b_enc); accepts one embedding or a (B, d_e) batch."""
    rows, single = _rows(e, pp.config.embed_dim, "embedding")
    t = ad.tanh(rows @ pp.tensor("enc_w").swapaxes(0, 1) + pp.tensor("enc_b"))
    return t.reshape(pp.config.token_dim) if single else t


def reconstruct(pp: ProjectorParams, t) -> ad.Tensor:
    """Affine decode W_dec t + b_dec; accepts one token or a (B, d_t) batch."""
    rows, single = _rows(t, pp.config.token_dim, "token")
    e = rows @ pp.tensor("dec_w").swapaxes(0, 1) + pp.tensor("dec_b")
    return e.reshape(pp.config.embed_dim) if single else e
