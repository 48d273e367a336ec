"""Decoder tokens to dense displacement fields, plus multi-scale fusion.

Each scale's head projects every token to 2*p*p values that un-patch into
a full-resolution 2-channel offset field (dx, dy in normalized
coordinates), so multi-scale fusion is a plain softmax-weighted sum with
no resampling step.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import BadMagicError, LengthMismatchError, ShapeMismatchError, TruncatedFileError

FIELD_MAGIC = b"AIRFLD1\x00"


@dataclass
class DeformHeadParams:
    projection: Tensor  # (d, 2*p*p)
    bias: Tensor  # (2*p*p,)


@dataclass
class MaptConfig:
    scales: tuple  # patch size per parallel transformer
    fusion_logits: Tensor  # (len(scales),), softmaxed into fusion weights

    def fusion_weights(self):
        return engine.softmax(self.fusion_logits)


def init_deform_head(cfg, dtype=np.float32):
    """Zero-initialized head: the model starts as the identity warp."""
    out = 2 * cfg.patch_len
    return DeformHeadParams(
        projection=Tensor(np.zeros((cfg.dim, out), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros(out, dtype=dtype), requires_grad=True),
    )


def init_mapt_config(scales, dtype=np.float32):
    logits = Tensor(np.zeros(len(scales), dtype=dtype), requires_grad=True)
    return MaptConfig(scales=tuple(scales), fusion_logits=logits)


def tokens_to_field(decoder_out, head, cfg):
    """Project tokens to per-pixel offsets and un-patch to (…, H, W, 2)."""
    x = decoder_out if isinstance(decoder_out, Tensor) else Tensor(np.asarray(decoder_out))
    if x.shape[-2] != cfg.tokens:
        raise ShapeMismatchError(
            f"decoder output has {x.shape[-2]} tokens, config expects {cfg.tokens}"
        )
    if x.shape[-1] != head.projection.shape[0]:
        raise ShapeMismatchError(
            f"token dim {x.shape[-1]} does not match head projection "
            f"{head.projection.shape[0]}"
        )
    y = engine.add(engine.matmul(x, head.projection), head.bias)  # (…, n, 2*p*p)
    lead = y.shape[:-2]
    gr, gc, p = cfg.grid_rows, cfg.grid_cols, cfg.patch_size
    nl = len(lead)
    y = engine.reshape(y, lead + (gr, gc, 2, p, p))
    # (…, gr, gc, 2, p, p) -> (…, 2, gr, p, gc, p)
    axes = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1, nl + 4)
    y = engine.transpose(y, axes)
    y = engine.reshape(y, lead + (2, cfg.image_height, cfg.image_width))
    # channels last: (…, H, W, 2)
    axes = tuple(range(nl)) + (nl + 1, nl + 2, nl)
    return engine.transpose(y, axes)


def fuse_fields(fields, cfg):
    """Softmax-weighted sum of per-scale fields sharing one resolution."""
    if len(fields) != len(cfg.scales):
        raise LengthMismatchError(
            f"{len(fields)} fields for {len(cfg.scales)} configured scales"
        )
    fields = [f if isinstance(f, Tensor) else Tensor(np.asarray(f)) for f in fields]
    shape = fields[0].shape
    for f in fields[1:]:
        if f.shape != shape:
            raise ShapeMismatchError(f"field shapes differ: {f.shape} vs {shape}")
    if len(fields) == 1:
        return fields[0]
    stacked = engine.stack(fields, axis=0)
    weights = engine.reshape(cfg.fusion_weights(), (len(fields),) + (1,) * len(shape))
    return engine.reduce_sum(engine.mul(weights, stacked), axis=0)


def write_field(path, field):
    """Raw field file: magic, two big-endian u32 (H, W), then H*W
    little-endian float32 (dx, dy) pairs in row-major order."""
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[2] != 2:
        raise ShapeMismatchError(f"expected (H, W, 2) field, got {field.shape}")
    h, w = field.shape[:2]
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack(">II", h, w))
        f.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_field(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise BadMagicError(f"{path}: not a displacement field file")
    if len(blob) < len(FIELD_MAGIC) + 8:
        raise TruncatedFileError(f"{path}: missing field header")
    h, w = struct.unpack(">II", blob[len(FIELD_MAGIC) : len(FIELD_MAGIC) + 8])
    payload = blob[len(FIELD_MAGIC) + 8 :]
    expected = h * w * 2 * 4
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: field payload has {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload[:expected], dtype="<f4").reshape(h, w, 2).copy()
