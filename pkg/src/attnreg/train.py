"""End-to-end unsupervised optimization of the registration model.

One forward pass embeds both images per scale, runs the encoder over the
fixed stream and the decoder over the moving stream, projects decoder
tokens to a displacement field, fuses scales, and warps the moving image.
The image-similarity loss backpropagates through the whole chain
(including the sampler) and Adam updates every parameter.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention, dataio, deform, embed, engine, warp
from .embed import PatchConfig
from .engine import Tensor
from .errors import BadMagicError, NonFiniteLossError, ShapeMismatchError, TruncatedFileError

CHECKPOINT_MAGIC = b"AIRCKPT1"
LOSSES = ("mse", "ncc")


@dataclass(frozen=True)
class ArchConfig:
    image_height: int = 28
    image_width: int = 28
    scales: tuple = (2,)
    dim: int = 16
    heads: int = 4
    blocks: int = 1
    position_init: str = "learned"

    def __post_init__(self):
        for p in self.scales:
            if self.image_height % p or self.image_width % p:
                raise ShapeMismatchError(
                    f"scale {p} does not divide {self.image_height}x{self.image_width}"
                )


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    dropout: float = 0.5
    seed: int = 0
    pairing_mode: str = "same-class"
    loss: str = "mse"
    smoothness_weight: float = 0.0
    pairs_per_epoch: int = 10000
    input_smoothing: float = 0.75
    dice_smoothing: float = 1.3
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


@dataclass
class ScaleParams:
    patch: PatchConfig
    embed_fixed: embed.EmbedParams
    embed_moving: embed.EmbedParams
    transformer: attention.TransformerParams
    head: deform.DeformHeadParams


@dataclass
class ModelParams:
    arch: ArchConfig
    scale_params: list
    fusion: deform.MaptConfig

    def named_parameters(self):
        """Deterministic (name, tensor) manifest; checkpoint payload order."""
        out = []
        for p, sp in zip(self.arch.scales, self.scale_params):
            pre = f"scale{p}"
            for stream, ep in (("embed_fixed", sp.embed_fixed), ("embed_moving", sp.embed_moving)):
                out.append((f"{pre}/{stream}/projection", ep.projection))
                out.append((f"{pre}/{stream}/bias", ep.projection_bias))
                out.append((f"{pre}/{stream}/positions", ep.positions))
            for side, blocks in (
                ("encoder", sp.transformer.encoder_blocks),
                ("decoder", sp.transformer.decoder_blocks),
            ):
                for bi, blk in enumerate(blocks):
                    base = f"{pre}/{side}{bi}"
                    attns = [("self", blk.self_attention)]
                    if blk.cross_attention is not None:
                        attns.append(("cross", blk.cross_attention))
                    for kind, ap in attns:
                        out.append((f"{base}/{kind}/w_q", ap.w_q))
                        out.append((f"{base}/{kind}/w_k", ap.w_k))
                        out.append((f"{base}/{kind}/w_v", ap.w_v))
                        out.append((f"{base}/{kind}/w_c", ap.w_c))
                        out.append((f"{base}/{kind}/norm_gain", ap.norm_gain))
                        out.append((f"{base}/{kind}/norm_bias", ap.norm_bias))
                    out.append((f"{base}/ff/w1", blk.ff_w1))
                    out.append((f"{base}/ff/b1", blk.ff_b1))
                    out.append((f"{base}/ff/w2", blk.ff_w2))
                    out.append((f"{base}/ff/b2", blk.ff_b2))
                    out.append((f"{base}/ff/norm_gain", blk.ff_norm_gain))
                    out.append((f"{base}/ff/norm_bias", blk.ff_norm_bias))
            out.append((f"{pre}/head/projection", sp.head.projection))
            out.append((f"{pre}/head/bias", sp.head.bias))
        out.append(("fusion/logits", self.fusion.fusion_logits))
        return out

    def tensors(self):
        return [t for _, t in self.named_parameters()]


def init_model(arch, seed=0, dtype=np.float32, dropout=0.5):
    rng = np.random.default_rng(seed)
    scale_params = []
    for p in arch.scales:
        cfg = PatchConfig(arch.image_height, arch.image_width, p, arch.dim)
        scale_params.append(
            ScaleParams(
                patch=cfg,
                embed_fixed=embed.init_embed_params(cfg, rng, dtype, arch.position_init),
                embed_moving=embed.init_embed_params(cfg, rng, dtype, arch.position_init),
                transformer=attention.init_transformer_params(
                    arch.dim, arch.heads, arch.blocks, rng, dtype, dropout_rate=dropout
                ),
                head=deform.init_deform_head(cfg, dtype),
            )
        )
    return ModelParams(
        arch=arch,
        scale_params=scale_params,
        fusion=deform.init_mapt_config(arch.scales, dtype),
    )


def forward_batch(fixed, moving, params, training=False, rng=None):
    """Batched forward pass: (B, H, W) arrays in, (warped, field) tensors out."""
    fixed = np.asarray(fixed)
    moving = np.asarray(moving)
    arch = params.arch
    if fixed.shape != moving.shape or fixed.shape[-2:] != (arch.image_height, arch.image_width):
        raise ShapeMismatchError(
            f"expected matching {arch.image_height}x{arch.image_width} image stacks, "
            f"got fixed {fixed.shape} and moving {moving.shape}"
        )
    dtype = params.fusion.fusion_logits.dtype
    fixed = fixed.astype(dtype, copy=False)
    moving = moving.astype(dtype, copy=False)
    fields = []
    for sp in params.scale_params:
        fixed_tokens = embed.embed(embed.patchify(fixed, sp.patch), sp.embed_fixed)
        memory = attention.encode(fixed_tokens, sp.transformer, training, rng)
        moving_tokens = embed.embed(embed.patchify(moving, sp.patch), sp.embed_moving)
        decoded = attention.decode(moving_tokens, memory, sp.transformer, training, rng)
        fields.append(deform.tokens_to_field(decoded, sp.head, sp.patch))
    fused = deform.fuse_fields(fields, params.fusion)
    grid = warp.identity_grid(arch.image_height, arch.image_width, dtype=dtype)
    warped = warp.warp(moving, grid, fused)
    return warped, fused


def forward(pair, params, training=False, rng=None):
    """Single-pair forward; returns plain arrays for the warped image and field."""
    warped, fused = forward_batch(
        pair.fixed[None], pair.moving[None], params, training, rng
    )
    return {"warped": warped.data[0], "field": fused.data[0]}


def _forward_diff(x, axis):
    nd = x.ndim
    ax = axis % nd
    hi = tuple(slice(1, None) if i == ax else slice(None) for i in range(nd))
    lo = tuple(slice(None, -1) if i == ax else slice(None) for i in range(nd))
    return engine.sub(engine.take(x, hi), engine.take(x, lo))


def smoothness_penalty(field):
    """Mean squared forward difference of the field over both spatial axes."""
    dr = _forward_diff(field, -3)
    dc = _forward_diff(field, -2)
    total = engine.add(
        engine.reduce_sum(engine.mul(dr, dr)), engine.reduce_sum(engine.mul(dc, dc))
    )
    count = int(np.prod(dr.shape)) + int(np.prod(dc.shape))
    return engine.div(total, float(count))


def mse_loss(warped, fixed):
    diff = engine.sub(warped, Tensor(np.asarray(fixed, dtype=warped.dtype)))
    return engine.reduce_mean(engine.mul(diff, diff))


def ncc_loss(warped, fixed, eps=1e-8):
    """1 - mean normalized cross-correlation over the batch."""
    fixed_t = Tensor(np.asarray(fixed, dtype=warped.dtype))
    axes = (-2, -1)
    wc = engine.sub(warped, engine.reduce_mean(warped, axes, keepdims=True))
    fc = engine.sub(fixed_t, engine.reduce_mean(fixed_t, axes, keepdims=True))
    num = engine.reduce_sum(engine.mul(wc, fc), axes)
    den = engine.sqrt(
        engine.add(
            engine.mul(
                engine.reduce_sum(engine.mul(wc, wc), axes),
                engine.reduce_sum(engine.mul(fc, fc), axes),
            ),
            eps,
        )
    )
    return engine.sub(1.0, engine.reduce_mean(engine.div(num, den)))


def loss(warped, fixed, field, cfg):
    """Similarity loss plus the optional field-smoothness term."""
    if cfg.loss == "mse":
        base = mse_loss(warped, fixed)
    else:
        base = ncc_loss(warped, fixed)
    if cfg.smoothness_weight > 0.0:
        base = engine.add(base, engine.mul(smoothness_penalty(field), cfg.smoothness_weight))
    return base


class Adam:
    """Adam with bias-corrected first/second moments."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _epoch_pair_seed(seed, epoch):
    # distinct, deterministic stream per (run seed, epoch)
    return (seed * 1_000_003 + epoch) % (2**63)


def _batch_rng(seed, epoch, batch_start):
    return np.random.default_rng([seed, epoch, batch_start])


def train_epoch(dataset, params, optimizer, cfg, epoch=0):
    """One pass over freshly sampled pairs; returns the mean train loss."""
    pairs = dataio.sample_pairs(
        dataset, cfg.pairs_per_epoch, cfg.pairing_mode, _epoch_pair_seed(cfg.seed, epoch)
    )
    images = dataio.smooth_images(dataset.images, cfg.input_smoothing)
    fixed_idx = np.array([p.fixed_index for p in pairs])
    moving_idx = np.array([p.moving_index for p in pairs])
    losses = []
    for start in range(0, len(pairs), cfg.batch_size):
        sel = slice(start, start + cfg.batch_size)
        rng = _batch_rng(cfg.seed, epoch, start)
        fixed_b = images[fixed_idx[sel]]
        moving_b = images[moving_idx[sel]]
        warped, fused = forward_batch(fixed_b, moving_b, params, training=True, rng=rng)
        batch_loss = loss(warped, fixed_b, fused, cfg)
        value = float(batch_loss.item())
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"loss became {value} at epoch {epoch}, batch {start // cfg.batch_size}",
                epoch=epoch,
                batch=start // cfg.batch_size,
                loss=value,
            )
        optimizer.zero_grad()
        batch_loss.backward()
        optimizer.step()
        losses.append(value)
    return float(np.mean(losses))


def validation_loss(dataset, params, cfg, pair_count=256, seed=None):
    """Dropout-free loss on held-out pairs (model selection signal)."""
    seed = cfg.seed if seed is None else seed
    pair_count = min(pair_count, max(2, len(dataset)))
    pairs = dataio.sample_pairs(dataset, pair_count, cfg.pairing_mode, seed)
    images = dataio.smooth_images(dataset.images, cfg.input_smoothing)
    fixed_b = images[[p.fixed_index for p in pairs]]
    moving_b = images[[p.moving_index for p in pairs]]
    with engine.no_grad():
        warped, fused = forward_batch(fixed_b, moving_b, params, training=False)
        return float(loss(warped, fixed_b, fused, cfg).item())


def fit(dataset, arch, cfg, out_dir=None, log=None):
    """Full training run with per-epoch checkpoints and best-model tracking.

    A 5% slice of the train split is held out for validation-based best
    checkpoint selection (``best.airckpt``); the remaining records feed
    pair sampling. Returns (params, history).
    """
    n_val = int(len(dataset) * cfg.val_fraction)
    if n_val >= 2:
        train_ds = dataio.LabeledDataset(
            dataset.images[:-n_val], dataset.labels[:-n_val], dataset.split
        )
        val_ds = dataio.LabeledDataset(
            dataset.images[-n_val:], dataset.labels[-n_val:], dataset.split
        )
    else:
        train_ds, val_ds = dataset, None

    params = init_model(arch, cfg.seed, dropout=cfg.dropout)
    optimizer = Adam.from_config(params.tensors(), cfg)
    history = []
    best = (np.inf, None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "epoch-0000.airckpt"), params, cfg, 0, optimizer)
    for epoch in range(cfg.epochs):
        train_loss = train_epoch(train_ds, params, optimizer, cfg, epoch)
        val_loss = validation_loss(val_ds, params, cfg) if val_ds is not None else train_loss
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss})
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs}  train {train_loss:.5f}  val {val_loss:.5f}")
        if out_dir is not None:
            path = os.path.join(out_dir, f"epoch-{epoch + 1:04d}.airckpt")
            save_checkpoint(path, params, cfg, epoch + 1, optimizer)
            if val_loss < best[0]:
                best = (val_loss, path)
                save_checkpoint(os.path.join(out_dir, "best.airckpt"), params, cfg, epoch + 1, optimizer)
    return params, history


def save_checkpoint(path, params, cfg, epoch, optimizer=None):
    """Checkpoint layout: magic, big-endian u32 header length, canonical
    JSON header (arch + train config + parameter manifest with byte
    offsets), then float32 little-endian payloads: parameters in manifest
    order, then first moments, then second moments."""
    named = params.named_parameters()
    manifest = []
    offset = 0
    for name, tensor in named:
        nbytes = int(np.prod(tensor.shape)) * 4
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": 1,
        "arch": asdict(params.arch),
        "train_config": asdict(cfg),
        "epoch": int(epoch),
        "adam_step": int(optimizer.t) if optimizer is not None else 0,
        "rng": {"scheme": "per-epoch-derived", "seed": int(cfg.seed)},
        "manifest": manifest,
        "param_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">I", len(blob)))
        f.write(blob)
        for _, tensor in named:
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        moments = (
            (optimizer.m, optimizer.v)
            if optimizer is not None
            else ([np.zeros(t.shape) for _, t in named], [np.zeros(t.shape) for _, t in named])
        )
        for group in moments:
            for arr in group:
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, cfg, epoch, optimizer) rebuilt from the file."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack(">I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise TruncatedFileError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    arch_dict = dict(header["arch"])
    arch_dict["scales"] = tuple(arch_dict["scales"])
    arch = ArchConfig(**arch_dict)
    cfg = TrainConfig(**header["train_config"])
    params = init_model(arch, seed=cfg.seed, dtype=dtype, dropout=cfg.dropout)
    named = params.named_parameters()
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != [n for n, _ in named]:
        raise ShapeMismatchError(f"{path}: manifest does not match this model layout")
    payload = blob[12 + header_len :]
    param_bytes = header["param_bytes"]
    if len(payload) < 3 * param_bytes:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, expected {3 * param_bytes}"
        )

    def read_block(base, entry, tensor_shape):
        start = base + entry["offset"]
        count = int(np.prod(tensor_shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        return arr.reshape(tensor_shape).astype(dtype)

    optimizer = Adam.from_config(params.tensors(), cfg)
    optimizer.t = int(header["adam_step"])
    for i, ((name, tensor), entry) in enumerate(zip(named, manifest)):
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {shape}, expected {tensor.shape}")
        tensor.data = read_block(0, entry, shape)
        optimizer.m[i] = read_block(param_bytes, entry, shape)
        optimizer.v[i] = read_block(2 * param_bytes, entry, shape)
    return params, cfg, int(header["epoch"]), optimizer
