"""Registration quality metrics and test-set evaluation.

MSE and PSNR (peak 1.0) work on raw intensities. The soft Dice overlap
score optionally smooths both operands first; the smoothing width used
for reporting is a protocol knob carried by the run config. Statistics
are mean +/- population standard deviation over the evaluated pairs.
"""

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from . import dataio, engine, train
from .errors import LengthMismatchError, ShapeMismatchError

PSNR_CAP_DB = 99.0
DICE_EPS = 1e-6


def _check_same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10*log10(1/MSE) in dB with unit peak; identical images report the
    99 dB cap instead of infinity."""
    value = mse(a, b)
    if value <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / value), PSNR_CAP_DB))


def smooth_dice(a, b, smoothing_sigma=0.0, threshold=None):
    """Soft Dice overlap (2*sum(ab)+eps)/(sum(a^2)+sum(b^2)+eps).

    ``smoothing_sigma`` > 0 blurs both operands before the formula;
    ``threshold`` switches to binary Dice on thresholded masks.
    """
    a, b = _check_same_shape(a, b)
    if smoothing_sigma > 0.0:
        a = dataio.smooth_images(a, smoothing_sigma)
        b = dataio.smooth_images(b, smoothing_sigma)
    if threshold is not None:
        a = (a > threshold).astype(np.float64)
        b = (b > threshold).astype(np.float64)
    num = 2.0 * float(np.sum(a * b)) + DICE_EPS
    den = float(np.sum(a * a)) + float(np.sum(b * b)) + DICE_EPS
    return num / den


@dataclass
class RunMetrics:
    mse_mean: float
    mse_std: float
    psnr_mean: float
    psnr_std: float
    dice_mean: float
    dice_std: float
    pair_count: int

    def as_report(self, config_digest=""):
        return {
            "pairs": self.pair_count,
            "mse": {"mean": self.mse_mean, "std": self.mse_std},
            "psnr": {"mean": self.psnr_mean, "std": self.psnr_std},
            "dice": {"mean": self.dice_mean, "std": self.dice_std},
            "config_digest": config_digest,
        }


def summarize_pairs(warped_stack, fixed_stack, dice_smoothing=0.0):
    """Per-pair metrics aggregated to mean +/- population std."""
    if len(warped_stack) != len(fixed_stack):
        raise LengthMismatchError(
            f"{len(warped_stack)} warped images vs {len(fixed_stack)} fixed"
        )
    if len(warped_stack) < 2:
        raise ValueError("statistics need at least 2 pairs")
    mses = [mse(w, f) for w, f in zip(warped_stack, fixed_stack)]
    psnrs = [psnr(w, f) for w, f in zip(warped_stack, fixed_stack)]
    dices = [
        smooth_dice(w, f, smoothing_sigma=dice_smoothing)
        for w, f in zip(warped_stack, fixed_stack)
    ]
    return RunMetrics(
        mse_mean=float(np.mean(mses)),
        mse_std=float(np.std(mses)),
        psnr_mean=float(np.mean(psnrs)),
        psnr_std=float(np.std(psnrs)),
        dice_mean=float(np.mean(dices)),
        dice_std=float(np.std(dices)),
        pair_count=len(mses),
    )


def evaluate(
    params,
    dataset,
    pair_count=2000,
    pair_seed=0,
    pairing_mode="same-class",
    input_smoothing=0.0,
    dice_smoothing=0.0,
    chunk=256,
):
    """Metrics between warped moving and fixed images over seeded pairs."""
    pairs = dataio.sample_pairs(dataset, pair_count, pairing_mode, pair_seed)
    images = dataio.smooth_images(dataset.images, input_smoothing)
    fixed_all = images[[p.fixed_index for p in pairs]]
    moving_all = images[[p.moving_index for p in pairs]]
    warped_all = np.empty_like(fixed_all)
    with engine.no_grad():
        for start in range(0, len(pairs), chunk):
            sel = slice(start, start + chunk)
            warped, _ = train.forward_batch(
                fixed_all[sel], moving_all[sel], params, training=False
            )
            warped_all[sel] = warped.data
    return summarize_pairs(warped_all, fixed_all, dice_smoothing=dice_smoothing)


def config_digest(config):
    """Stable hex digest of a resolved-config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def render_report(metrics, config=None):
    """Canonical JSON report text (newline-terminated)."""
    digest = config_digest(config) if config is not None else ""
    return json.dumps(metrics.as_report(digest), sort_keys=True, separators=(",", ":")) + "\n"


def export_grid(fixed_images, moving_images, warped_images, path):
    """Write a 3-row tile (fixed / moving / warped, one column per pair)
    as an 8-bit binary PGM."""
    stacks = [np.asarray(s) for s in (fixed_images, moving_images, warped_images)]
    if not all(len(s) == len(stacks[0]) for s in stacks):
        raise LengthMismatchError("fixed/moving/warped collections differ in length")
    if len(stacks[0]) == 0:
        raise ValueError("cannot export an empty grid")
    rows = [np.concatenate(list(s), axis=1) for s in stacks]
    tile = np.concatenate(rows, axis=0)
    write_pgm(path, tile)
    return tile.shape


def write_pgm(path, image):
    """Binary (P5) PGM with maxval 255; intensities clipped from [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeMismatchError(f"PGM export needs a 2-D image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    """Read a binary PGM back to float intensities in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 2
    while len(tokens) < 3:
        match = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", blob[pos:])
        if match is None:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(int(match.group(1)))
        pos += match.end()
    width, height, maxval = tokens
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float32) / np.float32(maxval)
