import numpy as np
import pytest
import torch

from srusloc import network as net, srusform as sf
from srusloc.grid import GridSpec

TINY = net.NetConfig(m=1, stem_ch=8, hidden_ch=16, n_blocks=2, k_bins=4)


class TestSlidingWindows:
    @pytest.mark.parametrize("T,m,n_windows,first,last", [
        (10, 1, 10, 0, 9),
        (10, 3, 8, 1, 8),
        (10, 5, 6, 2, 7),
    ])
    def test_counts_and_centers(self, T, m, n_windows, first, last):
        windows = sf.sliding_windows(T, sf.WindowPlan(m=m))
        assert len(windows) == n_windows
        centers = [c for _, c in windows]
        assert centers[0] == first and centers[-1] == last
        for (t0, t1), c in windows:
            assert t1 - t0 == m
            assert c == t0 + (m - 1) // 2

    def test_stride(self):
        windows = sf.sliding_windows(10, sf.WindowPlan(m=3, stride=2))
        assert [c for _, c in windows] == [1, 3, 5, 7]

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            sf.sliding_windows(2, sf.WindowPlan(m=3))

    def test_even_m_rejected(self):
        with pytest.raises(ValueError):
            sf.WindowPlan(m=2)


class TestDecodeDetections:
    def test_origin_bin_center(self):
        grid = GridSpec()
        det = net.Detection(i=0, j=0, kz=0, kx=0, prob=1.0)
        (x, z), = sf.decode_detections([det], grid)
        assert x == pytest.approx(6.4375)
        assert z == pytest.approx(6.4375)

    def test_encode_decode_identity_on_bins(self):
        from srusloc.fieldsim import encode_labels
        grid = GridSpec(width_px=32, height_px=32)
        rng = np.random.default_rng(0)
        for _ in range(50):
            i, j = rng.integers(0, 32, 2)
            kx, kz = rng.integers(0, 4, 2)
            det = net.Detection(i=int(i), j=int(j), kz=int(kz), kx=int(kx), prob=1.0)
            (x, z), = sf.decode_detections([det], grid)
            lm, _ = encode_labels([(x, z)], grid)
            assert lm.detect[i, j] == 1
            assert lm.xbin[i, j] == kx and lm.zbin[i, j] == kz

    def test_decode_encode_error_bound(self):
        from srusloc.fieldsim import encode_labels
        grid = GridSpec()
        rng = np.random.default_rng(1)
        bound = grid.pitch_um * np.sqrt(2) / (2 * grid.upsample_k) + 1e-9
        for _ in range(200):
            x = rng.uniform(0, grid.width_um)
            z = rng.uniform(0, grid.height_um)
            lm, _ = encode_labels([(x, z)], grid)
            i, j = map(int, np.argwhere(lm.detect == 1)[0])
            det = net.Detection(i=i, j=j, kz=int(lm.zbin[i, j]),
                                kx=int(lm.xbin[i, j]), prob=1.0)
            (xd, zd), = sf.decode_detections([det], grid)
            assert np.hypot(xd - x, zd - z) <= bound

    def test_bad_bins_rejected(self):
        grid = GridSpec()
        det = net.Detection(i=0, j=0, kz=5, kx=0, prob=1.0)
        with pytest.raises(ValueError):
            sf.decode_detections([det], grid)


class TestAccumulate:
    def test_empty_is_noop(self):
        img = sf.FineGridImage.zeros(GridSpec(width_px=16, height_px=16))
        _, skipped = sf.accumulate([], img)
        assert skipped == 0
        assert img.counts.sum() == 0

    def test_same_point_twice(self):
        grid = GridSpec(width_px=16, height_px=16)
        img = sf.FineGridImage.zeros(grid)
        sf.accumulate([(100.0, 100.0), (100.0, 100.0)], img)
        assert img.counts.max() == 2
        assert img.counts.sum() == 2

    def test_conservation_and_skip_tally(self):
        grid = GridSpec(width_px=16, height_px=16)
        img = sf.FineGridImage.zeros(grid)
        rng = np.random.default_rng(2)
        pts = [(rng.uniform(0, grid.width_um), rng.uniform(0, grid.height_um))
               for _ in range(37)]
        pts.append((-5.0, 10.0))
        pts.append((10.0, grid.height_um + 1))
        _, skipped = sf.accumulate(pts, img)
        assert skipped == 2
        assert img.counts.sum() == 37

    def test_order_independence(self):
        grid = GridSpec(width_px=16, height_px=16)
        rng = np.random.default_rng(3)
        pts = [(rng.uniform(0, grid.width_um), rng.uniform(0, grid.height_um))
               for _ in range(25)]
        a = sf.FineGridImage.zeros(grid)
        b = sf.FineGridImage.zeros(grid)
        sf.accumulate(pts, a)
        sf.accumulate(list(reversed(pts)), b)
        assert np.array_equal(a.counts, b.counts)


def synthetic_tube(n=96, width=3.0, horizontal=True):
    zz, xx = np.mgrid[0:n, 0:n]
    if horizontal:
        return np.exp(-((zz - n / 2) ** 2) / (2 * width ** 2))
    return np.exp(-((xx - n / 2) ** 2) / (2 * width ** 2))


class TestJermanEnhance:
    def test_constant_image_gives_zero(self):
        out = sf.jerman_enhance(np.full((32, 32), 3.7), [1.0, 2.0])
        assert np.all(out == 0)

    def test_tube_centerline_dominates_background(self):
        img = synthetic_tube()
        out = sf.jerman_enhance(img, [3.0])
        center = out[48, 10:86].mean()
        background = np.concatenate([out[:32].ravel(), out[64:].ravel()]).mean()
        assert center >= 10 * max(background, 1e-12)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(4)
        img = rng.normal(size=(40, 40)) * 100
        out = sf.jerman_enhance(img, [1.0, 2.0, 3.0])
        assert out.min() >= 0.0
        assert out.max() <= 1.0

    def test_invariant_to_constant_offset(self):
        rng = np.random.default_rng(5)
        img = rng.normal(size=(32, 32))
        a = sf.jerman_enhance(img, [1.5, 2.5])
        b = sf.jerman_enhance(img + 42.0, [1.5, 2.5])
        assert np.allclose(a, b, atol=1e-9)

    def test_transpose_equivariance(self):
        img = synthetic_tube(horizontal=True) + 0.1 * synthetic_tube(horizontal=False)
        a = sf.jerman_enhance(img, [2.0, 3.0])
        b = sf.jerman_enhance(img.T, [2.0, 3.0])
        assert np.allclose(a, b.T, atol=1e-9)

    def test_requires_scales_and_valid_tau(self):
        with pytest.raises(ValueError):
            sf.jerman_enhance(np.zeros((8, 8)), [])
        with pytest.raises(ValueError):
            sf.jerman_enhance(np.zeros((8, 8)), [1.0], tau=0.0)


class TestFormSrus:
    def _stack(self, grid, T=6, seed=0):
        rng = np.random.default_rng(seed)
        return (rng.normal(size=(T, grid.height_px, grid.width_px))
                + 1j * rng.normal(size=(T, grid.height_px, grid.width_px)))

    def test_detecting_nothing_gives_zero_image(self):
        grid = GridSpec(width_px=16, height_px=16)
        model = net.init_params(TINY, seed=0)
        with torch.no_grad():
            model.dec_detect.bias.fill_(-50.0)
            model.dec_detect.weight.zero_()
        raw, enhanced, log = sf.form_srus(self._stack(grid), grid, model,
                                          sf.WindowPlan(m=1),
                                          sf.FormConfig(block=None or sf.FormConfig().block))
        assert raw.counts.sum() == 0
        assert np.all(enhanced.counts == 0)

    def test_window_log_count(self):
        grid = GridSpec(width_px=16, height_px=16)
        cfg3 = net.NetConfig(m=3, stem_ch=8, hidden_ch=16, n_blocks=2)
        model = net.init_params(cfg3, seed=0)
        T = 10
        _, _, log = sf.form_srus(self._stack(grid, T=T), grid, model,
                                 sf.WindowPlan(m=3))
        assert len(log) == T - 2
        assert [rec["center_frame"] for rec in log] == list(range(1, 9))

    def test_total_counts_match_detection_log(self):
        grid = GridSpec(width_px=16, height_px=16)
        model = net.init_params(TINY, seed=1)
        with torch.no_grad():
            model.dec_detect.bias.fill_(0.5)  # many detections
        raw, _, log = sf.form_srus(self._stack(grid), grid, model,
                                   sf.WindowPlan(m=1))
        expected = sum(r["n_detections"] - r["n_skipped"] for r in log)
        assert raw.counts.sum() == expected

    def test_fine_grid_shape(self):
        grid = GridSpec(width_px=16, height_px=20)
        img = sf.FineGridImage.zeros(grid)
        assert img.counts.shape == (80, 64)

    def test_too_short_stack_rejected(self):
        grid = GridSpec(width_px=16, height_px=16)
        model = net.init_params(net.NetConfig(m=3, stem_ch=8, hidden_ch=16,
                                              n_blocks=2), seed=0)
        with pytest.raises(ValueError):
            sf.form_srus(self._stack(grid, T=2), grid, model, sf.WindowPlan(m=3))
