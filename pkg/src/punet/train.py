"""Batching, optimisation, pretraining and fine-tuning loops, evaluation and run manifests."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus
from .decoding import (DecodeConfig, greedy_ctc_decode, joint_beam_search, lm_fn_for, model_decoder_fn)
from .features import (NO_NOISE, TRAIN_SNRS, SpecAugmentConfig, Spectrogram, make_babble, mix_at_snr,
                       normalize, spec_augment, stft)
from .losses import LossBreakdown, attention_ce_loss, ctc_loss, hybrid_loss
from .metrics import ErrorSummary, summarize
from .model import (AVSRModel, CharLM, init_from_pretrained, parse_key_values, pretrained_source,
                    to_key_values)
from .params import ParamStore


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup: int = 200
    lam: float = 0.3
    smoothing: float = 0.1
    clip: float = 5.0
    noisy: bool = True  # draw a per-sample SNR from ``snrs``
    snrs: tuple = TRAIN_SNRS
    spec_augment: bool = True
    babble_talkers: int = 6
    dtype: str = "float32"
    curriculum: bool = False  # short utterances first in epoch 1
    max_steps: int = 0  # 0: no cap
    fresh_lr_scale: float = 1.0  # lr multiplier for tensors not loaded from a pretrained checkpoint

    def to_text(self) -> str:
        return to_key_values(self)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_key_values(text, cls))


# ---------------------------------------------------------------------------
# optimisation


class NoamSchedule:
    """Linear warmup to ``peak`` at ``warmup`` steps, then inverse square root decay."""

    def __init__(self, peak: float, warmup: int):
        if warmup < 1 or peak <= 0:
            raise ValueError("schedule needs warmup >= 1 and peak > 0")
        self.peak, self.warmup = peak, warmup

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule steps start at 1")
        if step <= self.warmup:
            return self.peak * step / self.warmup
        return self.peak * math.sqrt(self.warmup / step)


class Adam:
    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, lr: float, clip: float = 0.0, scales: dict | None = None) -> float:
        """One update from the accumulated grads; returns the pre-clip global grad norm.

        ``scales`` maps tensor names to lr multipliers (default 1).
        """
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        scale = clip / norm if clip > 0 and norm > clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, t in self.params.items():
            g = grads[n] * scale
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            rate = lr * scales.get(n, 1.0) if scales else lr
            t.data -= (rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)
        self.params.version += 1
        return norm


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    uids: list
    texts: list
    targets: list  # token ids, no framing
    audio: np.ndarray  # (B, 4T', F)
    audio_mask: np.ndarray
    visual: np.ndarray  # (B, T', V)
    visual_mask: np.ndarray
    snrs: list

    @property
    def lengths(self) -> np.ndarray:
        return self.visual_mask.sum(axis=1)


def audio_features(wave: np.ndarray, rate: int, snr=NO_NOISE, noise: np.ndarray | None = None,
                   augment: SpecAugmentConfig | None = None, rng=None) -> np.ndarray:
    """Waveform (optionally mixed with noise) -> normalised log-magnitude frames."""
    if snr is not NO_NOISE:
        wave = mix_at_snr(wave, noise, snr)
    spec = stft(wave, rate)
    spec = Spectrogram(normalize(spec.frames), spec.frame_rate_hz, spec.bin_spacing_hz)
    if augment is not None:
        spec = spec_augment(spec, augment, rng)
    return spec.frames


class NoiseBank:
    """A long babble recording; each request reads a random window of it."""

    def __init__(self, waves, rng, talkers: int = 6, length: int = 1 << 18):
        self.wave = make_babble(waves, talkers, rng, length)

    def segment(self, n: int, rng) -> np.ndarray:
        start = int(rng.integers(0, self.wave.size))
        return np.roll(self.wave, -start)[:n] if n <= self.wave.size else np.resize(self.wave, n)


def make_batch(utts, vocab, rate: int, snrs=None, noise: NoiseBank | None = None, augment=None,
               rng=None, dtype=np.float32) -> Batch:
    snrs = list(snrs) if snrs is not None else [NO_NOISE] * len(utts)
    feats = []
    for u, s in zip(utts, snrs):
        seg = noise.segment(u.wave.size, rng) if s is not NO_NOISE else None
        feats.append(audio_features(u.wave, rate, s, seg, augment, rng))
    B = len(utts)
    Tv = max(u.n_frames for u in utts)
    F = feats[0].shape[1]
    V = utts[0].visual.shape[1]
    audio = np.zeros((B, 4 * Tv, F), dtype=dtype)
    amask = np.zeros((B, 4 * Tv), dtype=bool)
    visual = np.zeros((B, Tv, V), dtype=dtype)
    vmask = np.zeros((B, Tv), dtype=bool)
    for b, (u, f) in enumerate(zip(utts, feats)):
        if f.shape[0] != 4 * u.n_frames:
            raise ValueError(f"{u.uid}: {f.shape[0]} audio frames for {u.n_frames} visual frames")
        audio[b, :f.shape[0]] = f
        amask[b, :f.shape[0]] = True
        visual[b, :u.n_frames] = u.visual
        vmask[b, :u.n_frames] = True
    return Batch([u.uid for u in utts], [u.text for u in utts], [vocab.encode(u.text) for u in utts],
                 audio, amask, visual, vmask, snrs)


def decoder_io(targets, sos: int):
    """Teacher-forcing inputs ([sos] + y), outputs (y + [eos]) and their mask, padded."""
    L = max(len(t) for t in targets) + 1
    inp = np.full((len(targets), L), sos, dtype=np.int64)
    out = np.full((len(targets), L), sos, dtype=np.int64)
    mask = np.zeros((len(targets), L), dtype=bool)
    for b, t in enumerate(targets):
        inp[b, 1:len(t) + 1] = t
        out[b, :len(t)] = t
        mask[b, :len(t) + 1] = True
    return inp, out, mask


def check_vocab(corpus: Corpus, vocab) -> None:
    missing = sorted(set(corpus.characters) - set(vocab.characters()))
    if missing:
        raise ValueError(f"corpus characters {missing} are not in the model vocabulary")


# ---------------------------------------------------------------------------
# losses for one batch


def batch_loss(model: AVSRModel, batch: Batch, lam: float, smoothing: float, rng=None) -> LossBreakdown:
    enc = model.encode(batch, rng=rng)
    lengths = enc["mask"].sum(axis=1)
    ctc = ctc_loss(enc["log_probs"], batch.targets, lengths, blank=model.vocab.blank)
    inp, out, mask = decoder_io(batch.targets, model.vocab.sos)
    dec = model.decoder_log_probs(enc["R"], inp, mem_mask=enc["mask"])
    att = attention_ce_loss(dec, out, smoothing=smoothing, reduction="utterance", mask=mask)
    B = len(batch.targets)
    return hybrid_loss(ctc.sum() * (1.0 / B), att.sum() * (1.0 / B), lam)


def lm_loss(lm: CharLM, targets, smoothing: float = 0.0) -> Tensor:
    inp, out, mask = decoder_io(targets, lm.vocab.sos)
    return attention_ce_loss(lm.forward(inp), out, smoothing=smoothing, reduction="mean", mask=mask)


# ---------------------------------------------------------------------------
# training loops


def epoch_batches(utts, batch_size: int, rng, curriculum: bool = False, epoch: int = 0, bucket: int = 8):
    """Shuffled batches of similar-length utterances (less padding); short first when curriculum."""
    idx = rng.permutation(len(utts))
    if curriculum and epoch == 0:
        idx = sorted(idx, key=lambda i: (utts[i].n_frames, i))
        return [[utts[i] for i in idx[s:s + batch_size]] for s in range(0, len(idx), batch_size)]
    batches = []
    span = batch_size * bucket
    for s in range(0, len(idx), span):
        group = sorted(idx[s:s + span], key=lambda i: (utts[i].n_frames, i))
        batches += [group[k:k + batch_size] for k in range(0, len(group), batch_size)]
    order = rng.permutation(len(batches))
    return [[utts[i] for i in batches[j]] for j in order]


def train_model(model, utts, vocab, rate: int, tcfg: TrainConfig, seed: int, noise: NoiseBank | None = None,
                log=None, loss_fn=None) -> dict:
    """Shared loop for AVSR, ASR and lipreading models; returns the loss history."""
    rng = np.random.default_rng([seed, 17])
    model.params.astype(np.dtype(tcfg.dtype))
    opt = Adam(model.params)
    sched = NoamSchedule(tcfg.peak_lr, tcfg.warmup)
    augment = SpecAugmentConfig() if tcfg.spec_augment else None
    fresh = getattr(model, "fresh", ())
    scales = {n: tcfg.fresh_lr_scale for n in fresh} if tcfg.fresh_lr_scale != 1.0 else None
    history = {"total": [], "ctc": [], "att": [], "lr": []}
    step = 0
    for epoch in range(tcfg.epochs):
        for chunk in epoch_batches(utts, tcfg.batch_size, rng, tcfg.curriculum, epoch):
            if tcfg.noisy and noise is not None:
                snrs = [tcfg.snrs[int(rng.integers(len(tcfg.snrs)))] for _ in chunk]
            else:
                snrs = None
            batch = make_batch(chunk, vocab, rate, snrs, noise, augment, rng, dtype=np.dtype(tcfg.dtype))
            model.params.zero_grad()
            parts = (loss_fn or batch_loss)(model, batch, tcfg.lam, tcfg.smoothing, rng)
            if not np.isfinite(parts.total.data).all():
                raise FloatingPointError(f"non-finite loss at step {step + 1}")
            ad.backward(parts.total, model.params)
            step += 1
            lr = sched(step)
            opt.step(lr, tcfg.clip, scales)
            vals = parts.values()
            for k in ("total", "ctc", "att"):
                history[k].append(vals[k])
            history["lr"].append(lr)
            if log is not None:
                log(step, epoch, vals, lr)
            if tcfg.max_steps and step >= tcfg.max_steps:
                return history
    return history


def train_lm(lm: CharLM, texts, tcfg: TrainConfig, seed: int, log=None) -> dict:
    rng = np.random.default_rng([seed, 23])
    lm.params.astype(np.dtype(tcfg.dtype))
    opt = Adam(lm.params)
    sched = NoamSchedule(tcfg.peak_lr, tcfg.warmup)
    targets = [lm.vocab.encode(t) for t in texts]
    history = {"total": [], "lr": []}
    step = 0
    for epoch in range(tcfg.epochs):
        idx = rng.permutation(len(targets))
        for start in range(0, len(idx), tcfg.batch_size):
            lm.params.zero_grad()
            loss = lm_loss(lm, [targets[i] for i in idx[start:start + tcfg.batch_size]], tcfg.smoothing)
            ad.backward(loss, lm.params)
            step += 1
            lr = sched(step)
            opt.step(lr, tcfg.clip)
            history["total"].append(float(loss.data))
            history["lr"].append(lr)
            if log is not None:
                log(step, epoch, {"total": float(loss.data)}, lr)
            if tcfg.max_steps and step >= tcfg.max_steps:
                return history
    return history


def finetune_init(model: AVSRModel, asr: AVSRModel | None, lip: AVSRModel | None) -> AVSRModel:
    """Copy pretrained weights into an AVSR model; missing sources keep random init.

    Names of tensors that keep their fresh init are stored in ``model.fresh``.
    """
    if asr is None and lip is None:
        return model
    if asr is None or lip is None:
        raise ValueError("fine-tuning needs both the ASR and the lipreading checkpoint, or neither")
    if model.cfg.kind == "asr":  # audio-only baseline: continue from the ASR model
        model.params.load_state(asr.params.state())
        model.fresh = ()
        return model
    init_from_pretrained(model, asr.params, lip.params)
    model.fresh = tuple(n for n in model.params.names() if pretrained_source(n) is None)
    return model


# ---------------------------------------------------------------------------
# evaluation


def decode_batch(model: AVSRModel, batch: Batch, dcfg: DecodeConfig | None, lm: CharLM | None = None,
                 greedy: bool = False):
    """Decode every utterance of ``batch``; returns a list of (tokens, DecodeResult | None)."""
    with ad.no_grad():
        enc = model.encode(batch)
    lengths = enc["mask"].sum(axis=1)
    out = []
    lmf = lm_fn_for(lm) if lm is not None and dcfg is not None and dcfg.psi > 0 else None
    for b in range(len(batch.uids)):
        T = int(lengths[b])
        lp = enc["log_probs"].data[b, :T].astype(np.float64)
        if greedy:
            out.append((greedy_ctc_decode(lp, model.vocab.blank), None))
            continue
        R = enc["R"].data[b:b + 1, :T]
        res = joint_beam_search(lp, model_decoder_fn(model, R), lmf, dcfg, sos=model.vocab.sos,
                                blank=model.vocab.blank)
        out.append((res.tokens, res))
    return out


def evaluate(model: AVSRModel, utts, rate: int, snr=NO_NOISE, noise: NoiseBank | None = None,
             dcfg: DecodeConfig | None = None, lm: CharLM | None = None, seed: int = 0,
             batch_size: int = 50, greedy: bool = False):
    """Returns (records, ErrorSummary); records are (uid, hyp, ref, DecodeResult)."""
    if dcfg is not None and dcfg.psi > 0 and lm is None and not greedy:
        raise ValueError("evaluation with psi > 0 needs a language model checkpoint")
    if snr is not NO_NOISE and noise is None:
        raise ValueError("noisy evaluation needs a noise source")
    rng = np.random.default_rng([seed, 31])
    dtype = next(iter(model.params.values())).data.dtype
    records = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        batch = make_batch(chunk, model.vocab, rate, [snr] * len(chunk), noise, None, rng, dtype=dtype)
        for u, (tokens, res) in zip(chunk, decode_batch(model, batch, dcfg, lm, greedy)):
            records.append((u.uid, model.vocab.decode(tokens), u.text, res))
    return records, summarize((h, r) for _, h, r, _ in records)


def representations(model: AVSRModel, rate: int):
    """``represent(wave, visual)`` -> context representation R (T', d) for profiling."""
    from .corpus import Utterance

    def fn(wave, visual):
        u = Utterance("x", "test", "", np.asarray(wave, dtype=np.float32), visual,
                      np.zeros(visual.shape[0], dtype=np.int64), 0, 0)
        dtype = next(iter(model.params.values())).data.dtype
        feats = audio_features(u.wave, rate)
        batch = Batch(["x"], [""], [[]], feats[None].astype(dtype), np.ones((1, feats.shape[0]), bool),
                      np.asarray(visual, dtype=dtype)[None], np.ones((1, visual.shape[0]), bool), [None])
        with ad.no_grad():
            return model.encode(batch)["R"].data[0].astype(np.float64)
    return fn


# ---------------------------------------------------------------------------
# run manifests


def corpus_id(corpus: Corpus) -> str:
    h = hashlib.sha256(json.dumps(corpus.cfg.to_json(), sort_keys=True).encode())
    h.update(corpus.characters.encode())
    h.update(str(len(corpus.utterances)).encode())
    return h.hexdigest()[:16]


class RunManifest:
    """One JSON file per run: inputs (config, seed, corpus id) and outputs."""

    def __init__(self, command: str, seed: int, config: dict, corpus: str | None = None):
        self.data = {"command": command, "seed": seed, "config": config, "corpus_id": corpus,
                     "checkpoints": {}, "metrics": {}, "first_losses": [], "wall_clock_s": None}
        self._t0 = time.time()

    def inputs_key(self) -> str:
        keep = {k: self.data[k] for k in ("command", "seed", "config", "corpus_id")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()

    def write(self, path) -> Path:
        self.data["wall_clock_s"] = round(time.time() - self._t0, 3)
        path = Path(path)
        path.write_text(json.dumps(self.data, indent=1, sort_keys=True, default=str) + "\n")
        return path

    @staticmethod
    def read(path) -> dict:
        return json.loads(Path(path).read_text())


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
