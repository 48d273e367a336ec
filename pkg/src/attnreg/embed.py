"""Patch extraction and linear token embedding.

An image is cut into non-overlapping square patches in row-major grid
order; each flattened patch is projected to a d-dimensional token and a
learned positional vector is added.
"""

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class PatchConfig:
    image_height: int
    image_width: int
    patch_size: int
    dim: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.dim < 1:
            raise ValueError("patch_size and dim must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ShapeMismatchError(
                f"patch size {self.patch_size} does not divide "
                f"{self.image_height}x{self.image_width}"
            )

    @property
    def grid_rows(self):
        return self.image_height // self.patch_size

    @property
    def grid_cols(self):
        return self.image_width // self.patch_size

    @property
    def tokens(self):
        return self.grid_rows * self.grid_cols

    @property
    def patch_len(self):
        return self.patch_size * self.patch_size


@dataclass
class EmbedParams:
    projection: Tensor  # (p*p, d)
    projection_bias: Tensor  # (d,)
    positions: Tensor  # (n, d)


def init_embed_params(cfg, rng, dtype=np.float32, position_init="learned"):
    """Fan-in-scaled projection, zero bias, small positional table.

    ``position_init`` picks the positional table start: "learned" draws
    uniform(-0.02, 0.02); "sinusoidal" fills the classic sin/cos table
    (the table stays trainable either way).
    """
    p2, d, n = cfg.patch_len, cfg.dim, cfg.tokens
    bound = 1.0 / np.sqrt(p2)
    projection = Tensor(
        rng.uniform(-bound, bound, size=(p2, d)).astype(dtype), requires_grad=True
    )
    bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    if position_init == "sinusoidal":
        table = np.zeros((n, d), dtype=np.float64)
        pos = np.arange(n)[:, None]
        rates = np.exp(-np.log(10000.0) * (2 * (np.arange(d) // 2)) / d)[None, :]
        angles = pos * rates
        table[:, 0::2] = np.sin(angles[:, 0::2])
        table[:, 1::2] = np.cos(angles[:, 1::2])
        positions = Tensor(table.astype(dtype), requires_grad=True)
    elif position_init == "learned":
        positions = Tensor(
            rng.uniform(-0.02, 0.02, size=(n, d)).astype(dtype), requires_grad=True
        )
    else:
        raise ValueError(f"unknown position_init {position_init!r}")
    return EmbedParams(projection, bias, positions)


def patchify(image, cfg):
    """Split (…, H, W) pixels into (…, n, p*p) row-major grid patches."""
    image = np.asarray(image)
    h, w, p = cfg.image_height, cfg.image_width, cfg.patch_size
    if image.shape[-2:] != (h, w):
        raise ShapeMismatchError(f"image shape {image.shape} does not match config {h}x{w}")
    lead = image.shape[:-2]
    gr, gc = cfg.grid_rows, cfg.grid_cols
    x = image.reshape(lead + (gr, p, gc, p))
    x = np.moveaxis(x, -2, -3)  # (…, gr, gc, p, p)
    return x.reshape(lead + (cfg.tokens, cfg.patch_len))


def unpatchify(patches, cfg):
    """Inverse of patchify: (…, n, p*p) back to (…, H, W) pixels."""
    patches = np.asarray(patches)
    if patches.shape[-2:] != (cfg.tokens, cfg.patch_len):
        raise ShapeMismatchError(
            f"patch array shape {patches.shape} does not match config "
            f"(n={cfg.tokens}, p*p={cfg.patch_len})"
        )
    lead = patches.shape[:-2]
    gr, gc, p = cfg.grid_rows, cfg.grid_cols, cfg.patch_size
    x = patches.reshape(lead + (gr, gc, p, p))
    x = np.moveaxis(x, -2, -3)  # (…, gr, p, gc, p)
    return x.reshape(lead + (cfg.image_height, cfg.image_width))


def embed(patches, params):
    """Project flattened patches to tokens and add positional embeddings."""
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if data.shape[-1] != params.projection.shape[0]:
        raise ShapeMismatchError(
            f"patch length {data.shape[-1]} does not match projection rows "
            f"{params.projection.shape[0]}"
        )
    if data.shape[-2] != params.positions.shape[0]:
        raise ShapeMismatchError(
            f"token count {data.shape[-2]} does not match positional table "
            f"{params.positions.shape[0]}"
        )
    x = patches if isinstance(patches, Tensor) else Tensor(data)
    tokens = engine.matmul(x, params.projection)
    tokens = engine.add(tokens, params.projection_bias)
    return engine.add(tokens, params.positions)
