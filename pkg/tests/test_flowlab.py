import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from turbvid.flowlab import (Track, TrackSet, flow_tv, klt_track, lk_flow,
                             occlusion_mask, psnr_xt, to_gray, track_smoothness,
                             tv_histogram, warp_error_pair, warp_error_video,
                             xt_slice)
from turbvid.turbsim import TurbulenceParams, degrade, synthetic_scene


def smooth_texture(seed=0, size=64, sigma=2.5):
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.uniform(0, 1, (size, size)), sigma, mode="wrap")
    return (tex - tex.min()) / (tex.max() - tex.min())


class TestLkFlow:
    def test_identical_frames_zero_flow(self):
        tex = smooth_texture(1)
        flow = lk_flow(tex, tex)
        assert np.abs(flow).max() < 1e-3

    def test_unit_translation(self):
        tex = smooth_texture(2)
        moved = np.roll(tex, 1, axis=1)
        flow = lk_flow(tex, moved, levels=3, window=21, iters=30)
        interior = flow[10:-10, 10:-10]
        err = np.hypot(interior[..., 0] - 1.0, interior[..., 1])
        assert np.median(err) < 0.2

    def test_multi_pixel_translation(self):
        tex = smooth_texture(3)
        moved = np.roll(tex, (2, 3), axis=(0, 1))
        flow = lk_flow(tex, moved, levels=3, window=21, iters=30)
        interior = flow[10:-10, 10:-10]
        err = np.hypot(interior[..., 0] - 3.0, interior[..., 1] - 2.0)
        assert np.median(err) < 0.5

    def test_constant_images_zero_flow(self):
        flat = np.full((32, 32), 0.5)
        flow = lk_flow(flat, flat + 0.01)
        assert np.abs(flow).max() < 1e-6

    def test_rejects_even_window(self):
        tex = smooth_texture(4, 32)
        with pytest.raises(ValueError, match="odd"):
            lk_flow(tex, tex, window=20)

    def test_determinism(self):
        tex = smooth_texture(5)
        moved = np.roll(tex, 1, axis=0)
        f1 = lk_flow(tex, moved)
        f2 = lk_flow(tex, moved)
        assert np.array_equal(f1, f2)


class TestOcclusionMask:
    def test_zero_flows_all_valid(self):
        z = np.zeros((16, 16, 2))
        assert np.all(occlusion_mask(z, z) == 1)

    def test_inconsistent_forward_all_invalid(self):
        fwd = np.zeros((16, 16, 2))
        fwd[..., 0] = 5.0
        bwd = np.zeros((16, 16, 2))
        assert np.all(occlusion_mask(fwd, bwd) == 0)

    def test_exactly_inverse_flows_valid(self):
        fwd = np.zeros((16, 16, 2))
        fwd[..., 0] = 1.0
        bwd = np.zeros((16, 16, 2))
        bwd[..., 0] = -1.0
        mask = occlusion_mask(fwd, bwd)
        assert np.all(mask[:, :-2] == 1)  # rightmost columns sample clamped bwd

    def test_swapping_inverse_flows_same_mask(self):
        rng = np.random.default_rng(6)
        fwd = np.zeros((20, 20, 2))
        fwd[..., 0] = 0.5
        fwd[..., 1] = -0.25
        bwd = -fwd
        m1 = occlusion_mask(fwd, bwd)
        m2 = occlusion_mask(bwd, fwd)
        assert np.array_equal(m1[2:-2, 2:-2], m2[2:-2, 2:-2])


class TestWarpError:
    def test_identical_frames_zero(self):
        rng = np.random.default_rng(7)
        f = rng.uniform(0, 1, (24, 24, 3))
        mask = np.ones((24, 24), dtype=np.uint8)
        assert warp_error_pair(f, f, np.zeros((24, 24, 2)), mask) == 0.0

    def test_constant_offset_analytic(self):
        f = np.zeros((16, 16, 3))
        g = np.full((16, 16, 3), 0.1)
        mask = np.ones((16, 16), dtype=np.uint8)
        err = warp_error_pair(f, g, np.zeros((16, 16, 2)), mask)
        assert err == pytest.approx(0.03, abs=1e-9)

    def test_half_masked_same_value(self):
        f = np.zeros((16, 16, 3))
        g = np.full((16, 16, 3), 0.1)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[:8] = 1
        err = warp_error_pair(f, g, np.zeros((16, 16, 2)), mask)
        assert err == pytest.approx(0.03, abs=1e-9)

    def test_all_occluded_returns_none(self):
        f = np.zeros((8, 8, 3))
        assert warp_error_pair(f, f, np.zeros((8, 8, 2)), np.zeros((8, 8))) is None

    def test_static_video_zero(self):
        video = synthetic_scene(4, 48, 48, seed=8)
        assert warp_error_video(video) < 1e-4

    def test_noise_increases_error(self):
        video = synthetic_scene(4, 48, 48, seed=9)
        rng = np.random.default_rng(9)
        noisy = np.clip(video + rng.normal(0, 0.05, video.shape), 0, 1)
        assert warp_error_video(noisy) > warp_error_video(video)

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            warp_error_video(synthetic_scene(1, 32, 32))

    def test_non_negative(self):
        video = synthetic_scene(3, 48, 48, seed=10)
        pack = degrade(video, TurbulenceParams(seed=10))
        assert warp_error_video(pack.degraded) >= 0.0


class TestKlt:
    def test_static_scene_stationary_tracks(self):
        video = synthetic_scene(10, 64, 64, seed=11)
        ts = klt_track(video)
        paths = [t.path_length() for t in ts.surviving()]
        assert len(paths) >= 10
        assert np.mean([p < 0.5 for p in paths]) >= 0.95

    def test_translating_pattern_tracked(self):
        frame0 = synthetic_scene(1, 64, 64, seed=12)[0]
        video = np.stack([np.roll(frame0, i, axis=1) for i in range(11)])
        ts = klt_track(video)
        survivors = ts.surviving()
        assert len(survivors) >= 5
        for t in survivors:
            dx = t.points[-1][0] - t.points[0][0]
            dy = t.points[-1][1] - t.points[0][1]
            assert abs(dx - 10.0) < 1.0, f"dx {dx}"
            assert abs(dy) < 1.0

    def test_blank_video_no_tracks(self):
        video = np.full((5, 32, 32, 3), 0.5, dtype=np.float32)
        ts = klt_track(video)
        assert len(ts) == 0

    def test_dead_track_stays_dead(self):
        frame0 = synthetic_scene(1, 64, 64, seed=13)[0]
        blank = np.full_like(frame0, 0.5)
        video = np.stack([frame0, blank, frame0, frame0])
        ts = klt_track(video)
        for t in ts.tracks:
            assert len(t.points) <= 2 or t.alive


class TestSmoothness:
    def test_linear_track_zero(self):
        t = Track(start_frame=0, points=[(float(i), 2.0 * i) for i in range(6)])
        assert track_smoothness(TrackSet(tracks=[t])) == 0.0

    def test_zigzag_magnitude_four(self):
        xs = [1.0, -1.0, 1.0, -1.0, 1.0]
        t = Track(start_frame=0, points=[(x, 0.0) for x in xs])
        assert track_smoothness(TrackSet(tracks=[t])) == pytest.approx(4.0)

    def test_short_tracks_ignored(self):
        t = Track(start_frame=0, points=[(0.0, 0.0), (5.0, 5.0)])
        assert track_smoothness(TrackSet(tracks=[t])) == 0.0


class TestSlicesAndTv:
    def test_static_slices_identical_rows(self):
        video = synthetic_scene(5, 32, 32, seed=14)
        sl = xt_slice(video, 10)
        assert sl.shape == (5, 32, 3)
        for t in range(1, 5):
            assert np.array_equal(sl[t], sl[0])

    def test_scroll_makes_diagonals(self):
        video = synthetic_scene(6, 32, 32, kind="drift", seed=15, drift=(1, 0))
        sl = xt_slice(video, 16)
        for t in range(1, 6):
            assert np.allclose(sl[t], np.roll(sl[0], t, axis=0))

    def test_row_out_of_range(self):
        with pytest.raises(IndexError):
            xt_slice(synthetic_scene(2, 16, 16), 16)

    def test_psnr_xt_equals_volume_psnr(self):
        from turbvid.quality import psnr
        rng = np.random.default_rng(16)
        a = rng.uniform(0, 1, (4, 24, 24, 3))
        b = rng.uniform(0, 1, (4, 24, 24, 3))
        assert abs(psnr_xt(a, b) - psnr(a, b)) < 1e-9

    def test_constant_flow_zero_tv(self):
        flow = np.zeros((16, 16, 2))
        flow[..., 0] = 3.7
        flow[..., 1] = -1.2
        assert flow_tv(flow) == 0.0

    def test_static_video_lowest_bin(self):
        video = synthetic_scene(4, 48, 48, seed=17)
        hist = tv_histogram(video, bins=8)
        assert hist.counts[0] == 3
        assert hist.counts[1:].sum() == 0
        assert len(hist.edges) == 9

    def test_degraded_has_higher_tv(self):
        video = synthetic_scene(4, 48, 48, seed=18)
        pack = degrade(video, TurbulenceParams(seed=18))
        assert tv_histogram(pack.degraded).mean_tv > tv_histogram(video).mean_tv


class TestGray:
    def test_weights(self):
        frame = np.zeros((2, 2, 3))
        frame[..., 0] = 1.0
        assert np.allclose(to_gray(frame), 0.299)

    def test_metrics_pure(self):
        video = synthetic_scene(3, 32, 32, seed=19)
        pack = degrade(video, TurbulenceParams(seed=19))
        assert warp_error_video(pack.degraded) == warp_error_video(pack.degraded)
