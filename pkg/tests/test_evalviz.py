"""Metrics, full-image prediction, attention maps, and logging tests."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from patchcount import patchio
from patchcount.encoder import AttentionRecord
from patchcount.evalviz import (AttentionMap, ConvergenceLog, attention_map,
                                export_pgm, mae_mse, predict_image,
                                write_eval_report)
from patchcount.model import ModelConfig, init_params


class TestMaeMse:
    def test_zero_on_equal(self):
        assert mae_mse([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)

    def test_hand_values(self):
        mae, mse = mae_mse([3.0, 4.0], [0.0, 0.0])
        assert mae == 3.5
        assert mse == math.sqrt(12.5)

    def test_single_image_collapse(self):
        mae, mse = mae_mse([7.0], [0.0])
        assert mae == mse == 7.0

    def test_mae_le_mse_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(1, 30)
            p, g = rng.normal(size=n) * 10, rng.normal(size=n) * 10
            mae, mse = mae_mse(p, g)
            assert mae <= mse + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mae_mse([], [])


def constant_head_model(cfg, value):
    """Zero weights everywhere; head output bias fixed to `value`."""
    params = init_params(cfg, 0)
    for name, p in params.items():
        if not name.endswith(("gamma",)):
            p.data[:] = 0.0
    params["head.b2"].data[:] = value
    return params


class TestPredictImage:
    def test_constant_model_six_tiles(self):
        cfg = ModelConfig(image_size=384, patch_size=16, dim=8, heads=2,
                          layers=1, hidden_dim=8)
        params = constant_head_model(cfg, 2.5)
        img = np.random.default_rng(1).random((500, 900, 3)).astype(np.float32)
        count = predict_image(img, params, cfg)
        npt.assert_allclose(count, 6 * 2.5, rtol=1e-5)

    def test_negative_clamped(self):
        cfg = ModelConfig(image_size=384, patch_size=16, dim=8, heads=2,
                          layers=1, hidden_dim=8)
        params = constant_head_model(cfg, -1.0)
        img = np.zeros((768, 1152, 3), dtype=np.float32)
        assert predict_image(img, params, cfg) == 0.0

    def test_toy_path_single_tile(self):
        cfg = ModelConfig(image_size=64, patch_size=8, dim=8, heads=2,
                          layers=1, hidden_dim=8)
        params = constant_head_model(cfg, 3.0)
        img = np.zeros((64, 64, 3), dtype=np.float32)
        npt.assert_allclose(predict_image(img, params, cfg), 3.0, rtol=1e-5)

    def test_deterministic(self):
        cfg = ModelConfig(image_size=64, patch_size=8, dim=8, heads=2,
                          layers=1, hidden_dim=8)
        params = init_params(cfg, 2)
        img = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
        assert predict_image(img, params, cfg) == predict_image(img, params, cfg)


class TestAttentionMap:
    def _cfg(self, variant="gap"):
        return ModelConfig(image_size=16, patch_size=8, dim=8, heads=2,
                           layers=1, hidden_dim=8, head_variant=variant)

    def test_uniform_attention_degenerates_to_zeros(self):
        cfg = self._cfg()
        uniform = np.full((1, 4, 4), 0.25, dtype=np.float32)
        recs = [AttentionRecord(layer=0, head=h, weights=uniform) for h in range(2)]
        amap = attention_map(recs, cfg)
        npt.assert_array_equal(amap.grid, np.zeros((2, 2)))

    def test_single_token_map(self):
        cfg = ModelConfig(image_size=8, patch_size=8, dim=8, heads=1,
                          layers=1, hidden_dim=8)
        recs = [AttentionRecord(layer=0, head=0,
                                weights=np.ones((1, 1, 1), dtype=np.float32))]
        amap = attention_map(recs, cfg)
        npt.assert_array_equal(amap.grid, np.zeros((1, 1)))

    def test_token_variant_uses_token_row(self):
        cfg = self._cfg("token")
        w = np.zeros((1, 5, 5), dtype=np.float32)  # 4 patches + reg token
        w[0, 0] = [0.0, 0.7, 0.1, 0.1, 0.1]  # token's query row
        recs = [AttentionRecord(layer=0, head=0, weights=w)]
        amap = attention_map(recs, cfg)
        assert amap.grid[0, 0] == 1.0  # patch 1 is the max after min-max
        assert amap.grid.shape == (2, 2)

    def test_last_layer_selected(self):
        cfg = self._cfg()
        lo = np.full((1, 4, 4), 0.25, dtype=np.float32)
        hi = np.zeros((1, 4, 4), dtype=np.float32)
        hi[:, :, 0] = 1.0
        recs = [AttentionRecord(layer=0, head=0, weights=lo),
                AttentionRecord(layer=1, head=0, weights=hi)]
        amap = attention_map(recs, cfg)
        assert amap.grid[0, 0] == 1.0
        assert amap.grid[1, 1] == 0.0

    def test_empty_records(self):
        with pytest.raises(ValueError):
            attention_map([], self._cfg())


class TestExportPgm:
    def test_all_zero_payload(self, tmp_path):
        amap = AttentionMap(grid=np.zeros((2, 2), dtype=np.float32), provenance="t")
        path = tmp_path / "z.pgm"
        export_pgm(amap, str(path))
        assert path.read_bytes().endswith(bytes(4))

    def test_hand_rounded_bytes(self, tmp_path):
        grid = np.array([[0.0, 1.0], [0.5, 0.25]], dtype=np.float32)
        path = tmp_path / "m.pgm"
        export_pgm(AttentionMap(grid=grid, provenance="t"), str(path))
        assert path.read_bytes()[-4:] == bytes([0, 255, 128, 64])

    def test_roundtrip_within_quantization(self, tmp_path):
        grid = np.random.default_rng(4).random((3, 5)).astype(np.float32)
        path = tmp_path / "r.pgm"
        export_pgm(AttentionMap(grid=grid, provenance="t"), str(path))
        back = patchio.load_pgm(str(path))
        npt.assert_allclose(back, grid, atol=0.5 / 255 + 1e-7)


class TestLogsAndReports:
    def test_convergence_log_lines(self, tmp_path):
        path = str(tmp_path / "log.tsv")
        with ConvergenceLog(path) as log:
            for e in range(3):
                log.record(e, 1.0 - 0.1 * e, 2.0)
        lines = open(path).read().splitlines()
        assert lines[0] == "epoch\ttrain_loss\teval_mae"
        assert len(lines) == 4

    def test_eval_report_format(self, tmp_path):
        path = str(tmp_path / "report.tsv")
        write_eval_report(["a.ppm", "b.ppm"], [3.0, 4.0], [0.0, 0.0], path)
        lines = open(path).read().splitlines()
        assert lines[0] == "image\tpred\tgt"
        assert lines[-2].startswith("MAE\t3.5")
        assert lines[-1].startswith(f"MSE\t{math.sqrt(12.5):.4f}"[:8])
