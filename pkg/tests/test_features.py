import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from punet.autodiff import Tensor
from punet.features import (LOG_FLOOR, NO_NOISE, SpecAugmentConfig, Spectrogram, init_subsampler,
                            make_babble, mix_at_snr, parse_snr, power, spec_augment, stft,
                            subsample4x, subsampled_length)
from punet.params import ParamStore


def subsampler(n_bins=8, d_a=6, seed=0):
    store = ParamStore()
    init_subsampler(store, "sub", n_bins, d_a, np.random.default_rng(seed))
    return store.view("sub")


class TestSTFT:
    def test_one_second_at_16k_shape(self, rng):
        spec = stft(rng.normal(size=16000), 16000)
        assert spec.frames.shape == (100, 321)
        assert spec.frame_rate_hz == 100.0
        assert spec.bin_spacing_hz == 25.0

    def test_frame_count_uses_ceiling(self, rng):
        assert stft(rng.normal(size=16001), 16000).n_frames == 101

    def test_zero_wave_sits_on_floor(self):
        spec = stft(np.zeros(3200), 16000)
        np.testing.assert_array_equal(spec.frames, np.log(LOG_FLOOR))

    def test_sine_peaks_at_its_bin(self):
        rate, k = 16000, 37
        t = np.arange(rate) / rate
        spec = stft(np.sin(2 * np.pi * k * 25.0 * t + 0.3), rate)
        interior = spec.frames[3:-3]  # windows fully inside the signal
        np.testing.assert_array_equal(interior.argmax(axis=1), k)

    def test_matches_direct_dft_on_interior_frame(self, rng):
        rate, win, hop = 3200, 128, 32
        x = rng.normal(size=640)
        spec = stft(x, rate)
        t = 5  # frame centred on sample 160
        seg = x[t * hop - win // 2:t * hop + win // 2] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win))
        n = np.arange(win)
        dft = np.array([abs(np.sum(seg * np.exp(-2j * np.pi * f * n / win))) for f in range(win // 2 + 1)])
        np.testing.assert_allclose(spec.frames[t], np.log(dft), atol=1e-9)

    def test_empty_wave_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            stft(np.zeros(0), 16000)

    def test_non_integer_window_rejected(self):
        with pytest.raises(ValueError, match="non-integer"):
            stft(np.ones(100), 1001)


class TestSubsample:
    @pytest.mark.parametrize("T,expected", [(100, 25), (101, 26), (4, 1), (7, 2), (8, 2)])
    def test_output_length(self, T, expected, rng):
        out, _ = subsample4x(Tensor(rng.normal(size=(1, T, 8))), subsampler())
        assert out.shape == (1, expected, 6)
        assert subsampled_length(T) == expected

    @given(st.integers(4, 400))
    @settings(max_examples=40, deadline=None)
    def test_rate_is_quarter_of_input(self, T):
        out, _ = subsample4x(Tensor(np.zeros((1, T, 8))), subsampler())
        assert out.shape[1] == -(-T // 4)

    def test_zero_input_gives_zero_output(self):
        out, _ = subsample4x(Tensor(np.zeros((2, 20, 8))), subsampler())
        np.testing.assert_array_equal(out.data, 0.0)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="4 frames"):
            subsample4x(Tensor(np.zeros((1, 3, 8))), subsampler())

    def test_padding_does_not_leak_into_valid_frames(self, rng):
        p = subsampler()
        x = rng.normal(size=(1, 13, 8))
        alone, _ = subsample4x(Tensor(x), p)
        padded = np.concatenate([x, rng.normal(size=(1, 7, 8))], axis=1)
        mask = np.arange(20)[None, :] < 13
        out, m = subsample4x(Tensor(padded), p, mask)
        assert m.sum() == 4
        np.testing.assert_allclose(out.data[0, :3], alone.data[0, :3], atol=1e-12)


class TestSpecAugment:
    def spec(self, rng, T=100, F=321):
        return Spectrogram(rng.normal(size=(T, F)), 100.0, 25.0)

    def test_zero_width_is_identity(self, rng):
        s = self.spec(rng)
        cfg = SpecAugmentConfig(max_time_mask_s=0.0, max_freq_mask_hz=0.0, max_warp_frames=0)
        np.testing.assert_array_equal(spec_augment(s, cfg, rng).frames, s.frames)

    def test_time_masks_cover_at_most_eighty_frames(self):
        cfg = SpecAugmentConfig(n_freq_masks=0, max_warp_frames=0)
        for seed in range(200):
            rng = np.random.default_rng(seed)
            s = self.spec(rng)
            out = spec_augment(s, cfg, rng).frames
            touched = np.any(out != s.frames, axis=1).sum()
            assert touched <= 80

    def test_freq_masks_narrower_than_one_khz(self):
        cfg = SpecAugmentConfig(n_freq_masks=1, n_time_masks=0, max_warp_frames=0)
        widths = []
        for seed in range(300):
            rng = np.random.default_rng(seed)
            s = self.spec(rng)
            widths.append(np.any(spec_augment(s, cfg, rng).frames != s.frames, axis=0).sum())
        assert max(widths) == 39  # bins of 25 Hz, strictly under 1 kHz

    def test_masked_cells_hold_the_mean(self, rng):
        s = self.spec(rng)
        cfg = SpecAugmentConfig(n_freq_masks=0, max_warp_frames=0)
        out = spec_augment(s, cfg, np.random.default_rng(5)).frames
        changed = out != s.frames
        np.testing.assert_allclose(out[changed], s.frames.mean())

    def test_fixed_seed_is_deterministic(self, rng):
        s = self.spec(rng)
        a = spec_augment(s, SpecAugmentConfig(), np.random.default_rng(9)).frames
        b = spec_augment(s, SpecAugmentConfig(), np.random.default_rng(9)).frames
        np.testing.assert_array_equal(a, b)

    def test_short_utterance_clamps(self, rng):
        s = self.spec(rng, T=5, F=10)
        out = spec_augment(s, SpecAugmentConfig(), rng)
        assert out.frames.shape == (5, 10)


class TestMixing:
    @pytest.mark.parametrize("snr", [0.0, 20.0, -5.0, 7.5])
    def test_noise_power_hits_target(self, snr, rng):
        clean = rng.normal(size=4000)
        noise = rng.normal(size=4000) * 3
        added = mix_at_snr(clean, noise, snr) - clean
        ratio = power(clean) / power(added)
        np.testing.assert_allclose(ratio, 10 ** (snr / 10), rtol=1e-9)

    def test_no_noise_returns_clean(self, rng):
        clean = rng.normal(size=100)
        np.testing.assert_array_equal(mix_at_snr(clean, rng.normal(size=100), NO_NOISE), clean)

    def test_short_noise_is_tiled(self, rng):
        out = mix_at_snr(rng.normal(size=1000), rng.normal(size=30), 5.0)
        assert out.shape == (1000,)

    def test_silent_clean_rejected(self, rng):
        with pytest.raises(ValueError, match="zero power"):
            mix_at_snr(np.zeros(10), rng.normal(size=10), 0.0)

    @given(st.floats(0.01, 100.0), st.floats(-10.0, 30.0))
    @settings(max_examples=50, deadline=None)
    def test_scale_equivariant(self, c, snr):
        rng = np.random.default_rng(0)
        clean, noise = rng.normal(size=200), rng.normal(size=200)
        np.testing.assert_allclose(mix_at_snr(c * clean, noise, snr), c * mix_at_snr(clean, noise, snr),
                                   rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("text,expected", [("clean", None), ("None", None), (None, None), ("-5", -5.0)])
    def test_parse_snr(self, text, expected):
        assert parse_snr(text) == expected


def kurtosis(x):
    x = x - x.mean()
    return np.mean(x ** 4) / np.mean(x ** 2) ** 2


class TestBabble:
    def waves(self, rng, n=30):
        # bursty sources, heavy tailed like speech
        return [rng.laplace(size=2000) * (rng.random(2000) < 0.2) for _ in range(n)]

    def test_unit_rms(self, rng):
        out = make_babble(self.waves(rng), 4, rng)
        assert power(out) == pytest.approx(1.0, rel=1e-12)

    def test_two_identical_inputs(self, rng):
        w = rng.normal(size=500)
        out = make_babble([w, w], 2, np.random.default_rng(0))
        assert out.shape == (500,)
        assert power(out) == pytest.approx(1.0)

    def test_more_talkers_flatter(self):
        rng = np.random.default_rng(0)
        waves = self.waves(rng)
        k = {n: np.mean([kurtosis(make_babble(waves, n, np.random.default_rng(s))) for s in range(20)])
             for n in (2, 4, 8, 16)}
        assert k[2] > k[4] > k[8] > k[16]

    def test_fixed_seed_reproducible(self, rng):
        waves = self.waves(rng)
        a = make_babble(waves, 3, np.random.default_rng(4))
        b = make_babble(waves, 3, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="empty"):
            make_babble([], 3, rng)
        with pytest.raises(ValueError, match="at least 2"):
            make_babble(self.waves(rng), 1, rng)
