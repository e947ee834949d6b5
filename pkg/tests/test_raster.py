import json
import warnings

import numpy as np
import pytest

from sslcd.errors import ConfigError, DataError
from sslcd.raster import (
    RasterPair,
    decode_raster,
    encode_raster,
    load_manifest,
    normalize_pair,
    read_raster,
    split_counts,
    write_dataset,
    write_raster,
)
from sslcd.synthetic import SyntheticSceneSpec, generate_benchmark, generate_synthetic_pair, value_noise


class TestRasterFormat:
    def test_header_and_payload_size(self, tmp_path):
        path = tmp_path / "a.raw"
        write_raster(np.zeros((2, 3, 4)), path)
        blob = path.read_bytes()
        header, payload = blob.split(b"\n", 1)
        assert header == b'{"shape":[2,3,4],"dtype":"f32","order":"CHW"}'
        assert len(payload) == 96

    def test_little_endian_payload(self):
        blob = encode_raster(np.array([1.0]))
        assert blob.endswith(b"\x00\x00\x80\x3f")

    @pytest.mark.parametrize("seed", range(10))
    def test_round_trip_bitwise(self, tmp_path, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(1, 5)))
        a = (rng.standard_normal(shape) * 10.0 ** rng.integers(-30, 30)).astype(np.float32)
        write_raster(a, tmp_path / "x.raw")
        b = read_raster(tmp_path / "x.raw")
        assert b.shape == a.shape and b.tobytes() == a.tobytes()

    def test_truncated_payload(self):
        blob = encode_raster(np.ones((2, 2)))
        with pytest.raises(DataError, match="payload"):
            decode_raster(blob[:-1])
        with pytest.raises(DataError, match="payload"):
            decode_raster(blob + b"\x00")

    @pytest.mark.parametrize(
        "blob",
        [
            b'{"shape":[1],"dtype":"f64","order":"CHW"}\n' + b"\x00" * 8,
            b'{"shape":[0],"dtype":"f32"}\n',
            b"no header at all",
            b"{broken\n0000",
        ],
    )
    def test_bad_headers(self, blob):
        with pytest.raises(DataError):
            decode_raster(blob)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_raster(tmp_path / "nope.raw")

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            encode_raster(np.array([np.nan]))


class TestRasterPair:
    def test_shape_checks(self):
        with pytest.raises(DataError):
            RasterPair("a", np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))
        with pytest.raises(DataError):
            RasterPair("a", np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), np.zeros((1, 3, 4)))
        with pytest.raises(DataError):
            RasterPair("a", np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), np.full((4, 4), 0.5))

    def test_two_dimensional_labels_promoted(self):
        p = RasterPair("a", np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), np.eye(4))
        assert p.labels.shape == (1, 4, 4) and p.bands == 2 and p.hw == (4, 4)


class TestNormalize:
    def test_random_band_moments(self):
        rng = np.random.default_rng(0)
        pair = RasterPair("a", rng.normal(3, 5, (3, 40, 40)), rng.uniform(-2, 9, (3, 40, 40)))
        out = normalize_pair(pair)
        for img in (out.t1, out.t2):
            x = img.astype(np.float64)
            assert np.all(np.abs(x.mean(axis=(1, 2))) < 1e-5)
            assert np.all(np.abs(x.std(axis=(1, 2)) - 1) < 1e-4)
        assert out.normalization["t1"]["mean"][0] == pytest.approx(pair.t1[0].mean(), rel=1e-6)

    def test_already_standard_is_unchanged(self):
        x = np.random.default_rng(1).standard_normal((2, 30, 30))
        x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
        out = normalize_pair(RasterPair("a", x, x))
        np.testing.assert_allclose(out.t1, x, atol=1e-6)

    def test_constant_band_warns_and_keeps_unit_std(self):
        x = np.random.default_rng(2).standard_normal((2, 5, 5))
        x[1] = 7.0
        with pytest.warns(RuntimeWarning, match="zero-variance"):
            out = normalize_pair(RasterPair("a", x, x + 1))
        assert not out.t1[1].any()
        assert out.normalization["t1"]["std"][1] == 1.0

    def test_input_untouched(self):
        x = np.random.default_rng(3).standard_normal((1, 4, 4)).astype(np.float32)
        pair = RasterPair("a", x.copy(), x.copy())
        normalize_pair(pair)
        np.testing.assert_array_equal(pair.t1, x)


class TestManifest:
    def _pairs(self, n=4):
        spec = SyntheticSceneSpec(size=(24, 24), bands=2, texture_scale=8, n_blobs=1, blob_size_range=(4, 8))
        return generate_benchmark(n, spec, seed=1)

    def test_write_and_load(self, tmp_path):
        pairs = self._pairs()
        write_dataset(pairs, tmp_path, ["train", "train", "val", "test"], {"note": "x"})
        man = load_manifest(tmp_path / "manifest.json")
        assert man.band_count == 2 and man.metadata == {"note": "x"}
        assert [e.id for e in man.by_split("train")] == [pairs[0].id, pairs[1].id]
        raw = man.load_pair(pairs[2].id, normalize=False)
        assert raw.t1.tobytes() == pairs[2].t1.tobytes()
        assert raw.labels.tobytes() == pairs[2].labels.tobytes()
        assert man.load_split("test")[0].normalization is not None

    def test_missing_file_and_unknown_id(self, tmp_path):
        pairs = self._pairs(2)
        write_dataset(pairs, tmp_path, ["train", "val"])
        (tmp_path / f"{pairs[1].id}_t2.raw").unlink()
        with pytest.raises(DataError, match="missing"):
            load_manifest(tmp_path / "manifest.json")
        man = load_manifest(tmp_path / "manifest.json", check_files=False)
        with pytest.raises(DataError):
            man.entry("nope")

    def test_duplicates_and_bad_split(self, tmp_path):
        entry = {"id": "a", "path_t1": "a", "path_t2": "b", "split": "train"}
        (tmp_path / "m.json").write_text(json.dumps({"band_count": 1, "entries": [entry, entry]}))
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(tmp_path / "m.json", check_files=False)
        (tmp_path / "m.json").write_text(json.dumps({"band_count": 1, "entries": [{**entry, "split": "dev"}]}))
        with pytest.raises(DataError, match="split"):
            load_manifest(tmp_path / "m.json", check_files=False)
        (tmp_path / "m.json").write_text("[]")
        with pytest.raises(DataError):
            load_manifest(tmp_path / "m.json")

    def test_band_count_mismatch(self, tmp_path):
        write_dataset(self._pairs(1), tmp_path, ["train"])
        raw = json.loads((tmp_path / "manifest.json").read_text())
        raw["band_count"] = 5
        (tmp_path / "manifest.json").write_text(json.dumps(raw))
        man = load_manifest(tmp_path / "manifest.json")
        with pytest.raises(DataError, match="bands"):
            man.load_split("train")

    @pytest.mark.parametrize("n,expected", [(60, (51, 6, 3)), (20, (17, 2, 1)), (1, (1, 0, 0))])
    def test_split_counts(self, n, expected):
        assert split_counts(n) == expected


class TestSynthetic:
    def test_identity_when_nothing_changes(self):
        spec = SyntheticSceneSpec(size=(32, 32), bands=3, gain_range=(1, 1), bias_range=(0, 0), noise_std=0, n_blobs=0, seed=4)
        pair = generate_synthetic_pair(spec)
        np.testing.assert_array_equal(pair.t1, pair.t2)
        assert not pair.labels.any()

    def test_pure_function_of_seed(self):
        spec = SyntheticSceneSpec(size=(40, 40), bands=2, blob_size_range=(5, 10), seed=9)
        a, b = generate_synthetic_pair(spec), generate_synthetic_pair(spec)
        assert a.t1.tobytes() == b.t1.tobytes() and a.t2.tobytes() == b.t2.tobytes() and a.labels.tobytes() == b.labels.tobytes()
        c = generate_synthetic_pair(SyntheticSceneSpec(size=(40, 40), bands=2, blob_size_range=(5, 10), seed=10))
        assert a.t1.tobytes() != c.t1.tobytes()

    @pytest.mark.parametrize("seed", range(6))
    def test_single_blob_area(self, seed):
        spec = SyntheticSceneSpec(size=(600, 600), bands=1, n_blobs=1, blob_size_range=(50, 50), seed=seed)
        area = generate_synthetic_pair(spec).labels.sum()
        assert 1960 <= area <= 2500

    def test_change_budget_respected(self):
        spec = SyntheticSceneSpec(size=(100, 100), bands=2, n_blobs=3, blob_size_range=(10, 20), seed=3)
        area = generate_synthetic_pair(spec).labels.sum()
        assert 0 < area <= 3 * 20 * 20

    def test_budget_exceeding_area_is_config_error(self):
        with pytest.raises(ConfigError):
            generate_synthetic_pair(SyntheticSceneSpec(size=(50, 50), n_blobs=5, blob_size_range=(40, 40)))
        with pytest.raises(ConfigError):
            generate_synthetic_pair(SyntheticSceneSpec(size=(50, 50), n_blobs=1, blob_size_range=(60, 60)))

    def test_unchanged_pixels_differ_less_than_changed(self):
        spec = SyntheticSceneSpec(size=(96, 96), bands=4, texture_scale=24, n_blobs=3, blob_size_range=(10, 24))
        for pair in generate_benchmark(8, spec, seed=5):
            n = normalize_pair(pair)
            d = np.linalg.norm(n.t1.astype(np.float64) - n.t2, axis=0)
            mask = pair.labels[0] == 1
            assert np.median(d[~mask]) < np.median(d[mask])

    def test_affine_shift_outside_mask(self):
        spec = SyntheticSceneSpec(size=(48, 48), bands=3, noise_std=0, n_blobs=2, blob_size_range=(6, 12), seed=8)
        pair = generate_synthetic_pair(spec)
        keep = pair.labels[0] == 0
        for b in range(3):
            x, y = pair.t1[b][keep].astype(np.float64), pair.t2[b][keep].astype(np.float64)
            gain, bias = np.polyfit(x, y, 1)
            assert 0.8 - 1e-4 <= gain <= 1.2 + 1e-4
            np.testing.assert_allclose(gain * x + bias, y, atol=1e-5)

    def test_value_noise_range(self):
        v = value_noise((37, 53), 9.5, np.random.default_rng(0))
        assert v.shape == (37, 53) and v.min() >= 0 and v.max() <= 1 and v.std() > 0.05
