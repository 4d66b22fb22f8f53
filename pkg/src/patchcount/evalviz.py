"""Evaluation metrics, full-image prediction, attention maps, run logging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import patchio
from .ndtensor import no_grad
from .model import HEAD_TOKEN
from .optim import batch_predictions


def mae_mse(preds, gts):
    """MAE and root-form MSE over per-image count errors.

    MSE here is sqrt(mean(|P - G|^2)): the root is part of the metric's
    definition in this codebase, despite the name.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise ValueError("empty input")
    err = np.abs(preds - gts)
    return float(err.mean()), float(math.sqrt((err ** 2).mean()))


def predict_image(img, params, cfg, standardize=True):
    """Predict a full image's count via the resize/tile/sum pipeline.

    Images already at the model's tile size skip the resize and use a
    single tile; anything else is resized to 768x1152, split into six
    384x384 tiles (each resized to the model's tile size when the model is
    smaller), and the tile predictions are summed. Clamped at zero.
    """
    side = cfg.image_size
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        tiles = [img]
    else:
        full = patchio.resize_bilinear(img, patchio.FULL_H, patchio.FULL_W)
        tiles = patchio.split_tiles(full)
        if side != patchio.TILE_SIDE:
            tiles = [patchio.resize_bilinear(t, side, side) for t in tiles]
    seqs = []
    for tile in tiles:
        if standardize:
            tile = patchio.normalize(tile)
        seqs.append(patchio.patchify(tile, cfg.patch_size))
    batch = patchio.PatchBatch(data=np.stack(seqs),
                               labels=np.zeros(1, dtype=np.float32),
                               tiles_per_image=len(tiles))
    with no_grad():
        preds, _ = batch_predictions(params, cfg, batch)
    return max(0.0, float(preds.data[0]))


def evaluate(pairs, params, cfg, standardize=True):
    """Per-image predictions plus aggregate MAE/MSE over a dataset."""
    preds = [predict_image(img, params, cfg, standardize=standardize)
             for img, _ in pairs]
    gts = [count for _, count in pairs]
    mae, mse = mae_mse(preds, gts)
    return preds, gts, mae, mse


def write_eval_report(names, preds, gts, path):
    """TSV report: one line per image, MAE/MSE footer."""
    mae, mse = mae_mse(preds, gts)
    with open(path, "w") as fh:
        fh.write("image\tpred\tgt\n")
        for name, p, g in zip(names, preds, gts):
            fh.write(f"{name}\t{p:.4f}\t{g:g}\n")
        fh.write(f"MAE\t{mae:.6f}\n")
        fh.write(f"MSE\t{mse:.6f}\n")
    return mae, mse


@dataclass
class AttentionMap:
    """Patch-grid attention weights, min-max normalized to [0, 1]."""

    grid: np.ndarray
    provenance: str


def attention_map(records, cfg):
    """Distill captured attention into one patch-grid map.

    Uses the last layer with all heads averaged. The Token variant takes
    the regression-token query row over the patch keys; the GAP variant
    takes the per-key mean over all query rows. A constant map min-max
    normalizes to all zeros.
    """
    if not records:
        raise ValueError("no attention records captured")
    last = max(r.layer for r in records)
    weights = [r.weights for r in records if r.layer == last]
    avg = np.mean([w[0] for w in weights], axis=0)  # single-image contract
    if cfg.head_variant == HEAD_TOKEN:
        row = avg[0, 1:]  # regression-token query over patch keys
    else:
        row = avg.mean(axis=0)
    g = cfg.image_size // cfg.patch_size
    grid = row.reshape(g, g)
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        norm = np.zeros_like(grid)
    else:
        norm = (grid - lo) / (hi - lo)
    return AttentionMap(grid=norm.astype(np.float32),
                        provenance=f"layer={last} heads=mean variant={cfg.head_variant}")


def export_pgm(amap, path):
    """Write an attention map as binary PGM P5, maxval 255."""
    grid = amap.grid
    payload = np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        fh.write(payload.tobytes())


class ConvergenceLog:
    """Append-only per-epoch TSV: epoch, train loss, eval MAE."""

    HEADER = "epoch\ttrain_loss\teval_mae\n"

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(self.HEADER)
        self._fh.flush()

    def record(self, epoch, train_loss, eval_mae=float("nan")):
        self._fh.write(f"{epoch}\t{train_loss:.6f}\t{eval_mae:.6f}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
