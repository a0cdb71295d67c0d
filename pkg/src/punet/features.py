"""Audio front end: STFT, 4x convolutional subsampling, SpecAugment, noise mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-10
NO_NOISE = None


@dataclass
class Spectrogram:
    frames: np.ndarray  # (T, F) log magnitudes
    frame_rate_hz: float
    bin_spacing_hz: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def stft(wave: np.ndarray, rate: int, window_ms: float = 40.0, hop_ms: float = 10.0) -> Spectrogram:
    """Center-padded Hann-window log-magnitude STFT.

    Frame ``t`` is centred on sample ``t * hop`` and there are
    ``ceil(N / hop)`` frames; the transform length equals the window.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise ValueError("stft: waveform must be a non-empty 1-D array")
    win = rate * window_ms / 1000.0
    hop = rate * hop_ms / 1000.0
    if abs(win - round(win)) > 1e-9 or abs(hop - round(hop)) > 1e-9:
        raise ValueError(f"stft: rate {rate} gives non-integer window/hop ({win}, {hop})")
    win, hop = int(round(win)), int(round(hop))
    n_frames = -(-wave.size // hop)
    half = win // 2
    padded = np.zeros(half + n_frames * hop + win)
    padded[half:half + wave.size] = wave
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    mag = np.abs(np.fft.rfft(padded[idx] * window, axis=-1))
    return Spectrogram(np.log(np.maximum(mag, LOG_FLOOR)), rate / hop, rate / win)


def normalize(frames: np.ndarray) -> np.ndarray:
    """Per-utterance, per-bin mean and variance normalisation."""
    mu = frames.mean(axis=0, keepdims=True)
    sd = frames.std(axis=0, keepdims=True)
    return (frames - mu) / np.where(sd > 1e-8, sd, 1.0)


# ---------------------------------------------------------------------------
# 4x subsampling


def init_subsampler(store, prefix: str, n_bins: int, d_a: int, rng) -> None:
    store.add(f"{prefix}.conv1.w", rng.normal(0.0, 1.0 / math.sqrt(3 * n_bins), size=(d_a, n_bins, 3)))
    store.add(f"{prefix}.conv1.b", np.zeros(d_a))
    store.add(f"{prefix}.conv2.w", rng.normal(0.0, 1.0 / math.sqrt(3 * d_a), size=(d_a, d_a, 3)))
    store.add(f"{prefix}.conv2.b", np.zeros(d_a))


def subsampled_length(T) -> np.ndarray:
    return -(-np.asarray(T) // 4)


def subsample4x(feats: Tensor, p, mask=None) -> tuple[Tensor, np.ndarray | None]:
    """Two stride-2 convolutions (kernel 3, pad 1): T frames -> ceil(T/4)."""
    T = feats.shape[1]
    if T < 4:
        raise ValueError(f"subsample4x: need at least 4 frames, got {T}")
    if mask is not None:
        feats = feats * np.asarray(mask, dtype=feats.dtype)[..., None]
    h = ad.silu(ad.conv1d(feats, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
    if mask is not None:
        lengths = -(-np.asarray(mask).sum(axis=1) // 2)
        m1 = np.arange(h.shape[1])[None, :] < lengths[:, None]
        h = h * m1[..., None].astype(h.dtype)
    out = ad.silu(ad.conv1d(h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
    if mask is None:
        return out, None
    lengths = subsampled_length(np.asarray(mask).sum(axis=1))
    return out, np.arange(out.shape[1])[None, :] < lengths[:, None]


# ---------------------------------------------------------------------------
# augmentation and noise


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_time_masks: int = 2
    max_time_mask_s: float = 0.4
    n_freq_masks: int = 2
    max_freq_mask_hz: float = 1000.0  # exclusive bound
    max_warp_frames: int = 5


def time_warp(frames: np.ndarray, w_max: int, rng: np.random.Generator) -> np.ndarray:
    T = frames.shape[0]
    if w_max <= 0 or T <= 2 * w_max + 1:
        return frames
    centre = int(rng.integers(w_max, T - w_max))
    target = centre + int(rng.integers(-w_max, w_max + 1))
    if target == centre:
        return frames
    # piecewise-linear map: [0, target] <- [0, centre], [target, T-1] <- [centre, T-1]
    out_t = np.arange(T, dtype=np.float64)
    src = np.where(out_t <= target, out_t * centre / max(target, 1),
                   centre + (out_t - target) * (T - 1 - centre) / max(T - 1 - target, 1))
    lo = np.clip(np.floor(src).astype(int), 0, T - 1)
    hi = np.clip(lo + 1, 0, T - 1)
    frac = (src - lo)[:, None]
    return frames[lo] * (1.0 - frac) + frames[hi] * frac


def spec_augment(spec: Spectrogram, cfg: SpecAugmentConfig, rng: np.random.Generator) -> Spectrogram:
    """Time warp, then time and frequency masks filled with the utterance mean."""
    frames = time_warp(spec.frames, cfg.max_warp_frames, rng)
    fill = spec.frames.mean()
    frames = frames.copy()
    T, F = frames.shape
    t_max = min(int(round(cfg.max_time_mask_s * spec.frame_rate_hz)), T)
    f_lim = min(int(math.ceil(cfg.max_freq_mask_hz / spec.bin_spacing_hz)), F + 1)  # widths < f_lim
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, f_lim)) if f_lim > 0 else 0
        if width:
            start = int(rng.integers(0, F - width + 1))
            frames[:, start:start + width] = fill
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, t_max + 1))
        if width:
            start = int(rng.integers(0, T - width + 1))
            frames[start:start + width, :] = fill
    return Spectrogram(frames, spec.frame_rate_hz, spec.bin_spacing_hz)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    reps = -(-n // noise.size)
    return np.tile(noise, reps)[:n]


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db) -> np.ndarray:
    """Add ``noise`` scaled so that 10 log10(P_clean / P_noise) equals ``snr_db``.

    ``snr_db`` of None (no noise) returns a copy of ``clean``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if snr_db is NO_NOISE:
        return clean.copy()
    pc = power(clean)
    if pc == 0.0:
        raise ValueError("mix_at_snr: clean signal has zero power")
    noise = fit_length(np.asarray(noise, dtype=np.float64), clean.size)
    pn = power(noise)
    if pn == 0.0:
        raise ValueError("mix_at_snr: noise has zero power")
    scale = math.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    return clean + scale * noise


def make_babble(waves, n: int, rng: np.random.Generator, length: int | None = None) -> np.ndarray:
    """Sum of ``n`` randomly drawn waveforms, each RMS-normalised, scaled to unit RMS."""
    waves = list(waves)
    if not waves:
        raise ValueError("make_babble: empty corpus")
    if n < 2:
        raise ValueError(f"make_babble: need at least 2 talkers, got {n}")
    picks = rng.choice(len(waves), size=n, replace=n > len(waves))
    length = length or max(len(waves[i]) for i in picks)
    out = np.zeros(length)
    for i in picks:
        w = np.asarray(waves[i], dtype=np.float64)
        w = np.roll(fit_length(w, length), int(rng.integers(0, length)))
        out += w / math.sqrt(max(power(w), 1e-20))
    return out / math.sqrt(power(out))


def parse_snr(value):
    """Map ``"clean"``/``"none"``/None to no noise, else a float in dB."""
    if value is None:
        return NO_NOISE
    if isinstance(value, str) and value.strip().lower() in {"clean", "none", "no noise", "inf"}:
        return NO_NOISE
    return float(value)


TRAIN_SNRS = (NO_NOISE, 20.0, 15.0, 10.0, 5.0, 0.0, -5.0)
