"""Transformer encoder: pre-LN multi-head self-attention and MLP blocks.

Each layer computes

    Z' = MSA(LN(Z)) + Z
    Z  = MLP(LN(Z')) + Z'

with no dropout and no final LN by default. Attention weights can be
captured per layer and head for map extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ndtensor import (Tensor, add, concat, gelu, layer_norm, matmul, slice_axis,
                       smul, softmax_rows, transpose_last)


@dataclass
class LayerParams:
    """One encoder layer's weights; Q/K/V stored as full [D, D] blocks."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class AttentionRecord:
    """Row-stochastic attention weights [B, S, S] for one layer and head."""

    layer: int
    head: int
    weights: object  # numpy array, detached from the graph


def scaled_attention(q, k, v, scale, record=False):
    """softmax(Q K^T * scale) V for one head.

    Returns (output, attention weights as numpy or None).
    """
    logits = smul(matmul(q, transpose_last(k)), scale)
    attn = softmax_rows(logits)
    out = matmul(attn, v)
    return out, (attn.data.copy() if record else None)


def msa(z, layer, n_heads, scale, layer_idx=0, record=False):
    """Multi-head self-attention: m parallel heads, concatenated, re-projected."""
    d = z.shape[-1]
    dh = d // n_heads
    q = matmul(z, layer.w_q)
    k = matmul(z, layer.w_k)
    v = matmul(z, layer.w_v)
    outs = []
    records = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        out, weights = scaled_attention(
            slice_axis(q, -1, lo, hi), slice_axis(k, -1, lo, hi),
            slice_axis(v, -1, lo, hi), scale, record=record)
        outs.append(out)
        if record:
            records.append(AttentionRecord(layer=layer_idx, head=h, weights=weights))
    merged = outs[0] if n_heads == 1 else concat(outs, axis=-1)
    return matmul(merged, layer.w_o), records


def mlp_block(z, layer):
    """Two linear layers (D -> 4D -> D) with GELU between, biases included."""
    h = gelu(add(matmul(z, layer.mlp_w1), layer.mlp_b1))
    return add(matmul(h, layer.mlp_w2), layer.mlp_b2)


def encoder_layer(z, layer, n_heads, scale, layer_idx=0, record=False):
    """Pre-LN attention block then pre-LN MLP block, each with a residual."""
    attn_out, records = msa(layer_norm(z, layer.ln1_gamma, layer.ln1_beta),
                            layer, n_heads, scale, layer_idx, record)
    z = add(attn_out, z)
    z = add(mlp_block(layer_norm(z, layer.ln2_gamma, layer.ln2_beta), layer), z)
    return z, records


def encode(z, layers, n_heads, scale, record=False):
    """Apply all encoder layers in order; returns (Z_L, attention records)."""
    all_records = []
    for idx, layer in enumerate(layers):
        z, records = encoder_layer(z, layer, n_heads, scale, idx, record)
        all_records.extend(records)
    return z, all_records
