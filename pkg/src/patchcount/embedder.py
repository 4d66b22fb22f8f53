"""Patch-to-token embedding: linear projection, position add, regression token."""

from __future__ import annotations

import numpy as np

from .ndtensor import Tensor, ShapeError, add, concat, matmul


def linear_embed(patches, proj):
    """Project flattened patches [B, N, P] through proj [P, D]; no bias."""
    if patches.shape[-1] != proj.shape[0]:
        raise ShapeError(
            f"patch dim {patches.shape[-1]} != projection rows {proj.shape[0]}")
    return matmul(patches, proj)


def add_position(tokens, pos):
    """Add per-position embeddings [S, D] to tokens [B, S, D]."""
    if tokens.shape[1] != pos.shape[0]:
        raise ShapeError(
            f"sequence length {tokens.shape[1]} != position rows {pos.shape[0]}")
    return add(tokens, pos)


def prepend_reg_token(tokens, reg_token):
    """Prepend the learnable regression token to every sequence in the batch.

    Output is [B, N+1, D] with the token at index 0; patch order preserved.
    """
    b = tokens.shape[0]
    # broadcast-add against zeros so gradient sums over the batch
    zeros = Tensor(np.zeros((b, 1, reg_token.shape[-1]), dtype=np.float32))
    tiled = add(zeros, reg_token)
    return concat([tiled, tokens], axis=1)
