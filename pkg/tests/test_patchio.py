"""Image I/O, preprocessing, patching, and synthetic dataset tests."""

import numpy as np
import numpy.testing as npt
import pytest

from patchcount import patchio
from patchcount.patchio import (PPMError, SynthSpec, augment, load_dataset,
                                load_pgm, load_ppm, make_batch, normalize,
                                patchify, resize_bilinear, save_ppm, split_tiles,
                                synth_generate, unpatchify, write_dataset)


def _write_ppm(path, w, h, payload, magic=b"P6", maxval=255):
    path.write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + payload)


class TestLoadPPM:
    def test_single_red_pixel(self, tmp_path):
        p = tmp_path / "a.ppm"
        _write_ppm(p, 1, 1, bytes([255, 0, 0]))
        img = load_ppm(p)
        npt.assert_array_equal(img, [[[1.0, 0.0, 0.0]]])

    def test_all_zero(self, tmp_path):
        p = tmp_path / "z.ppm"
        _write_ppm(p, 2, 2, bytes(12))
        npt.assert_array_equal(load_ppm(p), np.zeros((2, 2, 3)))

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "g.ppm"
        _write_ppm(p, 1, 1, bytes(3), magic=b"P5")
        with pytest.raises(PPMError, match="magic"):
            load_ppm(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ppm"
        _write_ppm(p, 2, 2, bytes(5))
        with pytest.raises(PPMError, match="truncated"):
            load_ppm(p)

    def test_bad_maxval(self, tmp_path):
        p = tmp_path / "m.ppm"
        _write_ppm(p, 1, 1, bytes(3), maxval=65535)
        with pytest.raises(PPMError, match="maxval"):
            load_ppm(p)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n1 1\n255\n" + bytes([0, 128, 255]))
        img = load_ppm(p)
        npt.assert_allclose(img, [[[0.0, 128 / 255, 1.0]]])

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, size=(5, 7, 3)) / 255.0).astype(np.float32)
        p = tmp_path / "r.ppm"
        save_ppm(img, p)
        npt.assert_allclose(load_ppm(p), img, atol=0.5 / 255)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(1).random((6, 8, 3)).astype(np.float32)
        assert resize_bilinear(img, 6, 8) is img

    def test_center_average(self):
        img = np.array([[0.0, 2.0], [4.0, 6.0]], dtype=np.float32)[..., None]
        img = np.repeat(img, 3, axis=2)
        out = resize_bilinear(img, 1, 1)
        npt.assert_allclose(out, np.full((1, 1, 3), 3.0), atol=1e-6)

    def test_constant_preserved(self):
        img = np.full((4, 6, 3), 0.42, dtype=np.float32)
        out = resize_bilinear(img, 13, 5)
        npt.assert_allclose(out, 0.42, atol=1e-6)


class TestSplitTiles:
    def test_constant_tiles(self):
        img = np.full((768, 1152, 3), 0.5, dtype=np.float32)
        tiles = split_tiles(img)
        assert len(tiles) == 6
        for tile in tiles:
            assert tile.shape == (384, 384, 3)
            npt.assert_array_equal(tile, 0.5)

    def test_bright_pixel_partition(self):
        img = np.zeros((768, 1152, 3), dtype=np.float32)
        img[0, 0, 0] = 1.0
        tiles = split_tiles(img)
        assert tiles[0].max() == 1.0
        assert all(t.max() == 0.0 for t in tiles[1:])

    def test_reassembly_bit_exact(self):
        img = np.random.default_rng(2).random((768, 1152, 3)).astype(np.float32)
        tiles = split_tiles(img)
        rows = [np.concatenate(tiles[r * 3 : (r + 1) * 3], axis=1) for r in range(2)]
        npt.assert_array_equal(np.concatenate(rows, axis=0), img)

    def test_wrong_size_instructs_resize(self):
        with pytest.raises(ValueError, match="resize"):
            split_tiles(np.zeros((100, 100, 3), dtype=np.float32))


class TestPatchify:
    def test_standard_shape(self):
        img = np.zeros((384, 384, 3), dtype=np.float32)
        assert patchify(img, 16).shape == (576, 768)

    def test_small_grid(self):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        assert patchify(img, 16).shape == (4, 768)

    def test_constant_rows(self):
        img = np.full((32, 32, 3), 0.25, dtype=np.float32)
        seq = patchify(img, 16)
        npt.assert_array_equal(seq, 0.25)

    def test_non_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            patchify(np.zeros((30, 32, 3), dtype=np.float32), 16)

    def test_roundtrip_bit_exact(self):
        img = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
        npt.assert_array_equal(unpatchify(patchify(img, 8), 64, 64, 8), img)

    def test_full_pipeline_shapes(self):
        # resize -> split -> patchify on a 1152x768 (WxH) input
        img = np.random.default_rng(4).random((700, 1000, 3)).astype(np.float32)
        full = resize_bilinear(img, 768, 1152)
        seqs = [patchify(t, 16) for t in split_tiles(full)]
        assert len(seqs) == 6
        assert all(s.shape == (576, 768) for s in seqs)


class _ScriptedRng:
    """Deterministic stand-in for Generator.random()."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


class TestAugment:
    def test_flip_involution(self):
        img = np.random.default_rng(5).random((8, 8, 3)).astype(np.float32)
        once = augment(img, _ScriptedRng([0.0, 1.0]))  # flip, no gray
        twice = augment(once, _ScriptedRng([0.0, 1.0]))
        npt.assert_array_equal(twice, img)

    def test_grayscale_channels_equal(self):
        img = np.random.default_rng(6).random((8, 8, 3)).astype(np.float32)
        out = augment(img, _ScriptedRng([1.0, 0.0]))  # no flip, gray
        npt.assert_array_equal(out[..., 0], out[..., 1])
        npt.assert_array_equal(out[..., 1], out[..., 2])

    def test_label_untouched_by_batching(self):
        pairs = synth_generate(SynthSpec(side=32, count_min=4, count_max=4, seed=1), 3)
        batch = make_batch(pairs, 8, rng=np.random.default_rng(0))
        npt.assert_array_equal(batch.labels, [4.0, 4.0, 4.0])


class TestSynth:
    def test_empty_scene(self):
        pairs = synth_generate(SynthSpec(side=32, count_min=0, count_max=0, seed=2), 4)
        assert all(c == 0.0 for _, c in pairs)

    def test_deterministic(self):
        spec = SynthSpec(side=32, count_min=0, count_max=9, seed=3)
        a = synth_generate(spec, 3)
        b = synth_generate(spec, 3)
        for (ia, ca), (ib, cb) in zip(a, b):
            npt.assert_array_equal(ia, ib)
            assert ca == cb

    def test_degenerate_count_range(self):
        pairs = synth_generate(SynthSpec(side=32, count_min=5, count_max=5, seed=4), 8)
        assert all(c == 5.0 for _, c in pairs)

    def test_values_in_range(self):
        pairs = synth_generate(SynthSpec(side=32, count_min=10, count_max=10, seed=5), 2)
        for img, _ in pairs:
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(count_min=5, count_max=2)
        with pytest.raises(ValueError):
            SynthSpec(dot_radius=0.5)
        with pytest.raises(ValueError):
            SynthSpec(side=4, dot_radius=2.0)

    def test_region_confines_dots(self):
        spec = SynthSpec(side=64, count_min=20, count_max=20, dot_radius=2.0,
                         noise_amp=0.0, seed=6, region=(0.0, 0.5, 0.0, 0.5))
        img, _ = synth_generate(spec, 1)[0]
        # mass outside the top-left quadrant is only gaussian tails
        assert img[:32, :32].sum() > 20 * img[40:, 40:].sum()

    def test_dataset_roundtrip(self, tmp_path):
        pairs = synth_generate(SynthSpec(side=16, count_min=0, count_max=3, seed=7), 5)
        write_dataset(pairs, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == 5
        for (ia, ca), (ib, cb) in zip(pairs, loaded):
            assert ca == cb
            npt.assert_allclose(ia, ib, atol=0.5 / 255)


class TestBatch:
    def test_normalize_off_is_identity(self):
        img = np.full((16, 16, 3), 0.5, dtype=np.float32)
        batch = make_batch([(img, 1.0)], 8, standardize=False)
        npt.assert_array_equal(batch.data, 0.5)

    def test_normalize_standardizes(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        out = normalize(img)
        npt.assert_allclose(out[0, 0], -patchio.IMAGENET_MEAN / patchio.IMAGENET_STD,
                            rtol=1e-5)

    def test_full_size_tiling(self):
        img = np.random.default_rng(8).random((768, 1152, 3)).astype(np.float32)
        batch = make_batch([(img, 9.0)], 16, standardize=False)
        assert batch.tiles_per_image == 6
        assert batch.data.shape == (6, 576, 768)
        assert batch.batch == 1

    def test_negative_label_rejected(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            make_batch([(img, -1.0)], 8)

    def test_load_pgm(self, tmp_path):
        p = tmp_path / "g.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        img = load_pgm(p)
        npt.assert_allclose(img, np.array([[0, 255], [128, 64]]) / 255.0)
