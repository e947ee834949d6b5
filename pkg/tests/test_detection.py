import numpy as np
import pytest

from sslcd.detection import (
    FIG_COLORS,
    N_BINS,
    apply_threshold,
    bin_index,
    cva_magnitude,
    detect_cva,
    detect_linear,
    encode_pgm,
    encode_ppm,
    f1_tuned_threshold,
    normalize_scores,
    otsu_bin,
    otsu_threshold,
    read_pgm,
    render_comparison,
    score_histogram,
    triangle_bin,
    triangle_threshold,
    write_pgm,
)
from sslcd.errors import DataError, DegenerateInputError
from sslcd.models import BranchConfig, SiameseOverlapModel, TripletEmbeddingModel
from sslcd.raster import RasterPair
from sslcd.training import LinearClassifier

from _oracles import otsu_oracle, random_histograms, triangle_oracle


@pytest.mark.parametrize("i", range(100))
def test_otsu_matches_brute_force(i):
    h = random_histograms(0)[i]
    assert otsu_bin(h) == otsu_oracle(h)


@pytest.mark.parametrize("i", range(100))
def test_triangle_matches_brute_force(i):
    h = random_histograms(1)[i]
    assert triangle_bin(h) == triangle_oracle(h)


class TestOtsu:
    def test_bimodal_split_lies_between_modes(self):
        h = np.zeros(N_BINS, int)
        h[40:60] = 100
        h[180:200] = 100
        k = otsu_bin(h)
        assert 60 <= k <= 180

    def test_two_spikes_tie_goes_low(self):
        h = np.zeros(N_BINS, int)
        h[10] = h[200] = 5
        assert otsu_bin(h) == 11

    def test_constant_map_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            otsu_threshold(np.full((4, 4), 3.0))


class TestTriangle:
    def test_skewed_right_tail(self):
        h = np.zeros(N_BINS, int)
        h[:100] = (1000 * np.exp(-np.arange(100) / 10.0)).astype(int)
        b, side = triangle_bin(h)
        assert side == "right" and 0 < b < 100

    def test_left_tail_is_mirrored(self):
        h = np.zeros(N_BINS, int)
        h[:100] = (1000 * np.exp(-np.arange(100) / 10.0)).astype(int)
        b, side = triangle_bin(h)
        assert triangle_bin(h[::-1]) == (N_BINS - 1 - b, "left")

    def test_threshold_orientation(self):
        rng = np.random.default_rng(2)
        scores = np.concatenate([rng.exponential(1.0, 5000), rng.uniform(8, 10, 200)])
        res = triangle_threshold(scores)
        norm = normalize_scores(scores)[0]
        changed = apply_threshold(norm, res.threshold)[0]
        assert changed[-200:].all()


def test_bins_are_left_open():
    norm = np.array([0.0, 1 / 256, 1 / 256 + 1e-12, 0.5, 1.0])
    np.testing.assert_array_equal(bin_index(norm), [0, 0, 1, 127, 255])
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.random(5000), np.arange(257) / 256])
    for k in range(1, N_BINS):
        np.testing.assert_array_equal(bin_index(x) >= k, x > k / N_BINS)


def test_threshold_reproduces_histogram_split():
    rng = np.random.default_rng(4)
    scores = np.concatenate([rng.normal(1, 0.2, 3000), rng.normal(3, 0.3, 500)])
    hist, norm, _, _ = score_histogram(scores)
    res = otsu_threshold(scores)
    assert int(apply_threshold(norm, res.threshold).sum()) == int(hist[res.bin :].sum())


class TestF1Tuned:
    def oracle(self, s, y):
        best, best_t = -1.0, None
        for t in np.linspace(s.min(), s.max(), N_BINS):
            p = s > t
            tp = int(np.sum(p & y))
            fp = int(np.sum(p & ~y))
            fn = int(np.sum(~p & y))
            f1 = 2 * tp / (2 * tp + fp + fn) if tp else -1.0
            if f1 > best:
                best, best_t = f1, t
        return best_t

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_sweep(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.random(400) < 0.2
        s = rng.normal(0, 1, 400) + 1.5 * y
        assert f1_tuned_threshold(s, y).threshold == self.oracle(s, y)

    def test_needs_positives(self):
        with pytest.raises(DataError):
            f1_tuned_threshold(np.arange(4.0), np.zeros(4))


class TestCVA:
    def test_magnitude_is_euclidean(self):
        f1 = np.zeros((2, 1, 2))
        f2 = np.array([[[3.0, 0.0]], [[4.0, 0.0]]])
        np.testing.assert_array_equal(cva_magnitude(f1, f2).rho, [[5.0, 0.0]])

    def test_identical_dates_are_a_no_change_scene(self):
        img = np.random.default_rng(5).standard_normal((3, 12, 12))
        model = TripletEmbeddingModel(BranchConfig(3, (4, 4, 4)), seed=0)
        cmap = detect_cva(RasterPair("same", img, img), model, 2, "otsu")
        assert not cmap.binary.any() and cmap.note == "no-change scene" and np.isinf(cmap.threshold)

    def test_detects_an_obvious_change(self):
        rng = np.random.default_rng(6)
        t1 = rng.normal(0, 0.05, (3, 40, 40))
        t2 = t1 + rng.normal(0, 0.05, t1.shape)
        t2[:, 10:20, 10:20] += 3.0
        labels = np.zeros((1, 40, 40))
        labels[:, 10:20, 10:20] = 1
        model = SiameseOverlapModel(BranchConfig(3, (8, 8, 8)), seed=1)
        for method in ("otsu", "triangle"):
            cmap = detect_cva(RasterPair("x", t1, t2, labels), model, 1, method)
            assert cmap.binary.shape == (1, 40, 40) and cmap.binary.dtype == np.uint8
            assert cmap.binary[0, 12:18, 12:18].all()
            assert cmap.binary.sum() < 0.2 * 1600

    def test_unknown_method(self):
        model = TripletEmbeddingModel(BranchConfig(1, (2, 2, 2)))
        with pytest.raises(ValueError):
            detect_cva(RasterPair("x", np.ones((1, 5, 5)), np.zeros((1, 5, 5))), model, 1, "kmeans")


def test_detect_linear_uses_threshold():
    model = TripletEmbeddingModel(BranchConfig(2, (3, 3, 3)), seed=2)
    rng = np.random.default_rng(7)
    pair = RasterPair("x", rng.standard_normal((2, 9, 9)), rng.standard_normal((2, 9, 9)))
    clf = LinearClassifier(3)
    clf.weight.data[1] = 1.0
    low = detect_linear(pair, model, 1, clf, 0.0)
    high = detect_linear(pair, model, 1, clf, 1.0)
    assert low.binary.sum() == 81 and high.binary.sum() == 0
    with pytest.raises(ValueError):
        detect_linear(pair, model, 1, LinearClassifier(5), 0.5)


class TestNetpbm:
    def test_pgm_bytes_and_round_trip(self, tmp_path):
        b = np.array([[[1, 0, 1], [0, 0, 1]]], np.uint8)
        assert encode_pgm(b) == b"P5\n3 2\n255\n\xff\x00\xff\x00\x00\xff"
        write_pgm(b, tmp_path / "m.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), b)

    def test_pgm_with_comment_and_bad_inputs(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x00\x07")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[[0, 1]]])
        (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(DataError):
            read_pgm(tmp_path / "t.pgm")
        (tmp_path / "p6.pgm").write_bytes(encode_ppm(np.zeros((1, 1, 3), np.uint8)))
        with pytest.raises(DataError):
            read_pgm(tmp_path / "p6.pgm")

    def test_render_trivial_cases(self):
        zeros = np.zeros((1, 3, 4), np.uint8)
        assert not render_comparison(zeros, zeros).any()
        rgb = render_comparison(np.ones((1, 3, 4)), zeros)
        assert (rgb.reshape(-1, 3) == FIG_COLORS["fp"]).all()

    def test_render_hand_case(self):
        pred = np.array([[1, 0], [1, 0]])
        truth = np.array([[1, 1], [0, 0]])
        blob = encode_ppm(render_comparison(pred, truth))
        assert blob == b"P6\n2 2\n255\n" + bytes([255, 255, 255, 0, 255, 0, 255, 0, 255, 0, 0, 0])

    def test_render_shape_mismatch(self):
        with pytest.raises(ValueError):
            render_comparison(np.zeros((2, 2)), np.zeros((3, 3)))
