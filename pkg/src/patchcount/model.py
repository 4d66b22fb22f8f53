"""Model configuration, parameter initialization, and the full forward pass.

Parameters live in a flat name -> Tensor dict so the optimizer and the
checkpoint format can treat every learnable array uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import embedder, encoder, heads
from .ndtensor import Tensor

HEAD_TOKEN = "token"
HEAD_GAP = "gap"

DENOM_MODEL_DIM = "model_dim"
DENOM_HEAD_DIM = "head_dim"


@dataclass
class ModelConfig:
    """Architecture constants. Defaults are the full-scale settings."""

    image_size: int = 384
    patch_size: int = 16
    dim: int = 768
    heads: int = 12
    layers: int = 12
    head_variant: str = HEAD_GAP
    hidden_dim: int | None = None  # regression-head width; defaults to dim
    attn_denominator: str = DENOM_MODEL_DIM
    final_ln: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_variant not in (HEAD_TOKEN, HEAD_GAP):
            raise ValueError(f"unknown head variant {self.head_variant!r}")
        if self.attn_denominator not in (DENOM_MODEL_DIM, DENOM_HEAD_DIM):
            raise ValueError(f"unknown attention denominator {self.attn_denominator!r}")
        if self.hidden_dim is None:
            self.hidden_dim = self.dim
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")

    @property
    def seq_len(self):
        """N: number of patch tokens per tile."""
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3

    @property
    def attn_scale(self):
        denom = self.dim if self.attn_denominator == DENOM_MODEL_DIM else self.dim // self.heads
        return 1.0 / np.sqrt(denom)


def init_params(cfg, seed):
    """Initialize every learnable array; truncated-normal(0, 0.02) projections."""
    rng = np.random.default_rng(seed)

    def tn(*shape):
        # truncated normal at 2 sigma, std 0.02
        a = rng.standard_normal(size=shape)
        while True:
            bad = np.abs(a) > 2.0
            if not bad.any():
                break
            a[bad] = rng.standard_normal(size=int(bad.sum()))
        return Tensor((a * 0.02).astype(np.float32), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    d, hid = cfg.dim, cfg.hidden_dim
    with_token = cfg.head_variant == HEAD_TOKEN
    pos_rows = cfg.seq_len + (1 if with_token else 0)

    params = {
        "embed.proj": tn(cfg.patch_dim, d),
        "embed.pos": tn(pos_rows, d),
    }
    if with_token:
        params["embed.reg_token"] = zeros(1, d)
    for l in range(cfg.layers):
        p = f"layer{l}."
        params[p + "ln1.gamma"] = ones(d)
        params[p + "ln1.beta"] = zeros(d)
        params[p + "w_q"] = tn(d, d)
        params[p + "w_k"] = tn(d, d)
        params[p + "w_v"] = tn(d, d)
        params[p + "w_o"] = tn(d, d)
        params[p + "ln2.gamma"] = ones(d)
        params[p + "ln2.beta"] = zeros(d)
        params[p + "mlp.w1"] = tn(d, 4 * d)
        params[p + "mlp.b1"] = zeros(4 * d)
        params[p + "mlp.w2"] = tn(4 * d, d)
        params[p + "mlp.b2"] = zeros(d)
    if cfg.final_ln:
        params["final_ln.gamma"] = ones(d)
        params["final_ln.beta"] = zeros(d)
    params["head.w1"] = tn(d, hid)
    params["head.b1"] = zeros(hid)
    params["head.w2"] = tn(hid, 1)
    params["head.b2"] = zeros(1)
    return params


def layer_params(params, layer_idx):
    """View of one encoder layer's weights as an encoder.LayerParams."""
    p = f"layer{layer_idx}."
    return encoder.LayerParams(
        ln1_gamma=params[p + "ln1.gamma"], ln1_beta=params[p + "ln1.beta"],
        w_q=params[p + "w_q"], w_k=params[p + "w_k"], w_v=params[p + "w_v"],
        w_o=params[p + "w_o"],
        ln2_gamma=params[p + "ln2.gamma"], ln2_beta=params[p + "ln2.beta"],
        mlp_w1=params[p + "mlp.w1"], mlp_b1=params[p + "mlp.b1"],
        mlp_w2=params[p + "mlp.w2"], mlp_b2=params[p + "mlp.b2"],
    )


def head_params(params, cfg):
    return heads.HeadParams(
        variant=cfg.head_variant,
        w1=params["head.w1"], b1=params["head.b1"],
        w2=params["head.w2"], b2=params["head.b2"],
    )


def grad_check_model(cfg, seed=0, samples_per_param=None, h=1e-3,
                     high_precision=False):
    """Finite-difference check of the whole model's gradients.

    Builds a one-image synthetic batch, takes the L1 loss as a function of
    each parameter tensor in turn, and returns the worst relative error.
    ``samples_per_param`` caps the coordinates checked per tensor (seeded
    subsample); None checks every coordinate.
    """
    from . import patchio
    from .heads import l1_loss
    from .ndtensor import grad_check

    params = init_params(cfg, seed)
    spec = patchio.SynthSpec(side=cfg.image_size, count_min=5, count_max=5,
                             dot_radius=max(1.0, cfg.image_size / 32), seed=seed)
    batch = patchio.make_batch(patchio.synth_generate(spec, 1), cfg.patch_size)
    labels = Tensor(batch.labels)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params.values():
        def f(_p):
            preds, _ = forward(params, cfg, batch.data)
            return l1_loss(preds, labels)

        sample = None
        if samples_per_param is not None and p.data.size > samples_per_param:
            sample = sorted(rng.choice(p.data.size, samples_per_param,
                                       replace=False).tolist())
        worst = max(worst, grad_check(f, p, h=h, sample=sample,
                                      high_precision=high_precision))
    return worst


def forward(params, cfg, patches, record_attention=False):
    """Patch sequences [B, N, K*K*3] -> raw per-tile counts [B].

    Returns (predictions, attention records). Predictions are raw head
    outputs; clamp at zero only when reporting final counts.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    e = embedder.linear_embed(x, params["embed.proj"])
    if cfg.head_variant == HEAD_TOKEN:
        e = embedder.prepend_reg_token(e, params["embed.reg_token"])
    z = embedder.add_position(e, params["embed.pos"])
    layers = [layer_params(params, l) for l in range(cfg.layers)]
    z, records = encoder.encode(z, layers, cfg.heads, cfg.attn_scale, record_attention)
    if cfg.final_ln:
        from .ndtensor import layer_norm
        z = layer_norm(z, params["final_ln.gamma"], params["final_ln.beta"])
    if cfg.head_variant == HEAD_GAP:
        pooled = heads.gap_pool(z)
    else:
        pooled = heads.token_pool(z)
    preds = heads.regress(pooled, head_params(params, cfg))
    return preds, records
