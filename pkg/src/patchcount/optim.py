"""Adam with decoupled weight decay, the training loop, and checkpoints.

Checkpoint layout (all integers 32-bit little-endian):
  magic "TCWD" | version=1 | json_len | json config block | array_count |
  per array: name_len, name utf-8, rank, dims..., float32 payload.
Optimizer moments are stored as "<param>.m" / "<param>.v"; the step
counter lives in the JSON block.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as model_mod
from . import patchio
from .ndtensor import Tensor, backward, reshape, sum_axis
from .heads import l1_loss

MAGIC = b"TCWD"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint file."""


class MissingGradError(RuntimeError):
    """A trainable parameter had no gradient at step time."""


@dataclass
class AdamState:
    """First/second-moment buffers plus hyperparameters."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainConfig:
    """Training-run settings; defaults follow the full-scale recipe."""

    batch_size: int = 24
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-5
    weight_decay: float = 1e-4
    augment: bool = True
    standardize: bool = True
    checkpoint_every: int = 0  # epochs; 0 = only at the end

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_adam(params, lr=1e-5, weight_decay=1e-4, beta1=0.9, beta2=0.999,
              eps=1e-8):
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                      weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params, state):
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied as theta -= lr * wd * theta before the Adam delta.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
        g = p.grad
        if state.weight_decay:
            p.data = p.data - np.float32(state.lr * state.weight_decay) * p.data
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - state.lr * update).astype(np.float32)


def batch_predictions(params, cfg, batch, record_attention=False):
    """Forward a PatchBatch into per-image predictions (tile sums)."""
    preds, records = model_mod.forward(params, cfg, batch.data,
                                       record_attention=record_attention)
    t = batch.tiles_per_image
    if t > 1:
        preds = sum_axis(reshape(preds, (batch.batch, t)), 1)
    return preds, records


def train_step(batch, params, cfg, state):
    """Forward, L1 loss, backward, Adam step. Returns the pre-step loss."""
    if batch.batch == 0:
        raise ValueError("empty batch")
    preds, _ = batch_predictions(params, cfg, batch)
    loss = l1_loss(preds, Tensor(batch.labels))
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        stats = activation_stats(params, cfg, batch)
        raise FloatingPointError(
            "non-finite training loss; max |activation| per layer: "
            + ", ".join(f"{k}={v:.3e}" for k, v in stats))
    for p in params.values():
        p.zero_grad()
    backward(loss)
    adam_step(params, state)
    return loss_val


def activation_stats(params, cfg, batch):
    """Max |activation| after embedding and after each encoder layer."""
    from . import embedder, encoder
    from .ndtensor import no_grad
    stats = []
    with no_grad():
        x = Tensor(batch.data)
        e = embedder.linear_embed(x, params["embed.proj"])
        if cfg.head_variant == model_mod.HEAD_TOKEN:
            e = embedder.prepend_reg_token(e, params["embed.reg_token"])
        z = embedder.add_position(e, params["embed.pos"])
        stats.append(("embed", float(np.abs(z.data).max())))
        for l in range(cfg.layers):
            z, _ = encoder.encoder_layer(z, model_mod.layer_params(params, l),
                                         cfg.heads, cfg.attn_scale)
            stats.append((f"layer{l}", float(np.abs(z.data).max())))
    return stats


def train(pairs, cfg, tcfg, params=None, state=None, epoch_callback=None,
          checkpoint_path=None):
    """Seeded training over (image, count) pairs; returns per-step losses.

    ``epoch_callback(epoch, mean_epoch_loss)`` fires after every epoch (used
    for convergence logging and eval hooks).
    """
    if params is None:
        params = model_mod.init_params(cfg, tcfg.seed)
    if state is None:
        state = init_adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed + 1)
    losses = []
    n = len(pairs)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            batch = patchio.make_batch([pairs[i] for i in idx], cfg.patch_size,
                                       rng=rng if tcfg.augment else None,
                                       standardize=tcfg.standardize)
            loss = train_step(batch, params, cfg, state)
            epoch_losses.append(loss)
        losses.extend(epoch_losses)
        if epoch_callback is not None:
            epoch_callback(epoch, float(np.mean(epoch_losses)))
        if checkpoint_path and tcfg.checkpoint_every and \
                (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(params, state, cfg, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(params, state, cfg, checkpoint_path)
    return params, state, losses


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

def _pack_array(name, arr):
    out = [struct.pack("<I", len(name.encode())), name.encode(),
           struct.pack("<I", arr.ndim)]
    out += [struct.pack("<I", d) for d in arr.shape]
    out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(params, state, cfg, path):
    """Write model + optimizer state atomically (tmp file then rename)."""
    config_block = {
        "model": asdict(cfg),
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                 "eps": state.eps, "weight_decay": state.weight_decay,
                 "t": state.t},
    }
    blob = json.dumps(config_block).encode()
    arrays = [(name, p.data) for name, p in params.items()]
    arrays += [(name + ".m", state.m[name]) for name in params]
    arrays += [(name + ".v", state.v[name]) for name in params]
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            fh.write(_pack_array(name, arr))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, expected_cfg=None):
    """Read a checkpoint; returns (params, AdamState, ModelConfig).

    With ``expected_cfg`` given, a variant or architecture mismatch raises
    instead of returning a partially-compatible model.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic, not a {MAGIC.decode()} checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob = json.loads(r.take(r.u32("config length"), "config block"))
    cfg = model_mod.ModelConfig(**blob["model"])
    if expected_cfg is not None and asdict(cfg) != asdict(expected_cfg):
        raise CheckpointError(
            f"checkpoint config {asdict(cfg)} does not match expected "
            f"{asdict(expected_cfg)}")
    adam = blob["adam"]

    arrays = {}
    for _ in range(r.u32("array count")):
        name = r.take(r.u32("name length"), "array name").decode()
        rank = r.u32("rank")
        dims = tuple(r.u32("dim") for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n, f"array {name!r} payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()

    reference = model_mod.init_params(cfg, seed=0)
    params = {}
    state = AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"],
                      eps=adam["eps"], weight_decay=adam["weight_decay"],
                      t=adam["t"])
    for name, ref in reference.items():
        for key in (name, name + ".m", name + ".v"):
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing array {key!r}")
            if arrays[key].shape != ref.shape:
                raise CheckpointError(
                    f"array {key!r} has shape {arrays[key].shape}, "
                    f"config implies {tuple(ref.shape)}")
        params[name] = Tensor(arrays[name], requires_grad=True)
        state.m[name] = arrays[name + ".m"]
        state.v[name] = arrays[name + ".v"]
    return params, state, cfg
