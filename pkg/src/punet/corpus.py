"""Synthetic audio-visual corpus with viseme ambiguity and visual lead.

Audio: each character owns a smooth random log-spectral envelope; a
character lasting ``d`` output frames (40 ms each) is rendered as ``4 d``
STFT hops of sinusoids at the STFT bin centres with fresh random phases,
per-segment amplitude jitter and a white-noise floor.  Some characters are
drawn as near copies of another character's envelope (acoustic confusion
pairs) that sit in different viseme groups.

Visual: one random template per viseme at 25 frames/s.  Visual frame ``t``
shows the viseme that is audible at output frame ``t + lead``, so lips move
``lead`` frames before the voice.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays

SPACE = " "
REST = "<rest>"


@dataclass
class VisemeMap:
    """Surjective character -> viseme id map."""

    groups: dict  # viseme name -> characters
    strict: bool = True

    def __post_init__(self):
        seen = set()
        for chars in self.groups.values():
            for c in chars:
                if c in seen:
                    raise ValueError(f"character {c!r} assigned to two visemes")
                seen.add(c)
        if self.strict and self.max_fan_in < 2:
            raise ValueError("viseme map must merge at least two characters")

    @classmethod
    def identity(cls, chars) -> "VisemeMap":
        return cls({c: [c] for c in chars}, strict=False)

    @property
    def names(self) -> list:
        return list(self.groups)

    @property
    def max_fan_in(self) -> int:
        return max(len(v) for v in self.groups.values())

    def viseme_of(self, char: str) -> int:
        for i, chars in enumerate(self.groups.values()):
            if char in chars:
                return i
        raise KeyError(f"character {char!r} has no viseme")


DEFAULT_VISEMES = {
    "bilabial": ["b", "p", "m"],
    "labiodental": ["f", "v"],
    "alveolar": ["t", "n"],
    "open": ["a"],
    "round": ["o"],
    "rest": [SPACE],
}


@dataclass
class SynthConfig:
    letters: str = "abfmnoptv"
    visemes: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_VISEMES.items()})
    # pairs whose audio envelopes are near copies (second derived from first)
    acoustic_pairs: list = field(default_factory=lambda: [["m", "n"], ["a", "o"], ["p", "t"], ["b", "v"]])
    pair_offset: float = 0.8  # height of the bump that separates a pair, log units
    sample_rate: int = 3200
    window_ms: float = 40.0
    hop_ms: float = 10.0
    dur_min: int = 3  # in output (subsampled) frames
    dur_max: int = 6
    lead_frames: int = 2
    lexicon_size: int = 40
    word_len: tuple = (2, 4)
    words_per_utt: tuple = (2, 3)
    visual_dim: int = 16
    visual_noise: float = 0.3
    amp_jitter: float = 0.15
    noise_floor: float = 0.02
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.lead_frames < 0 or self.lead_frames >= self.dur_min:
            raise ValueError(f"lead_frames={self.lead_frames} must be in [0, dur_min={self.dur_min})")
        if not 1 <= self.dur_min <= self.dur_max:
            raise ValueError(f"bad duration range ({self.dur_min}, {self.dur_max})")
        chars = set(self.letters) | {SPACE}
        mapped = {c for v in self.visemes.values() for c in v}
        if mapped != chars:
            raise ValueError(f"viseme map covers {sorted(mapped)}, characters are {sorted(chars)}")

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def samples_per_frame(self) -> int:
        return 4 * self.hop

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("word_len", "words_per_utt"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Utterance:
    uid: str
    split: str
    text: str
    wave: np.ndarray  # clean waveform reference
    visual: np.ndarray  # (T', visual_dim)
    frame_chars: np.ndarray  # (T',) index into ``characters`` of the audible character
    seed: int
    lead: int

    @property
    def n_frames(self) -> int:
        return len(self.frame_chars)


@dataclass
class Corpus:
    cfg: SynthConfig
    utterances: list
    characters: str  # space first, then letters

    def split(self, name: str) -> list:
        return [u for u in self.utterances if u.split == name]

    @property
    def viseme_map(self) -> VisemeMap:
        return VisemeMap(self.cfg.visemes, strict=False)


class CorpusTemplates:
    """Per-seed audio envelopes and visual templates."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        F = cfg.n_bins
        chars = SPACE + cfg.letters
        bins = np.arange(F)
        env = {}
        derived = {b: a for a, b in cfg.acoustic_pairs}
        for c in chars:
            if c == SPACE:
                env[c] = np.full(F, -3.0)
                continue
            e = np.full(F, -1.5)
            for _ in range(3):
                centre = rng.uniform(2, F - 3)
                width = rng.uniform(2.0, 6.0)
                e = e + rng.uniform(1.0, 3.0) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
            env[c] = e
        for c, base in derived.items():
            centre = rng.uniform(2, F - 3)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            env[c] = env[base] + sign * cfg.pair_offset * np.exp(-0.5 * ((bins - centre) / 3.0) ** 2)
        self.envelopes = env
        vmap = VisemeMap(cfg.visemes, strict=False)
        self.viseme_templates = rng.normal(0.0, 1.0, size=(len(vmap.groups), cfg.visual_dim))
        self.vmap = vmap
        self.rest_viseme = vmap.viseme_of(SPACE)

    def render_segment(self, char: str, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        F = cfg.n_bins
        freqs = np.arange(1, F - 1) * cfg.sample_rate / cfg.n_fft
        amp = np.exp(self.envelopes[char][1:F - 1] + cfg.amp_jitter * rng.normal(size=F - 2))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=F - 2)
        t = np.arange(n_samples) / cfg.sample_rate
        seg = np.cos(2.0 * math.pi * freqs[:, None] * t[None, :] + phase[:, None])
        return (amp[:, None] * seg).sum(axis=0) / math.sqrt(F)


def _lexicon(cfg: SynthConfig, rng: np.random.Generator) -> list:
    words = set()
    while len(words) < cfg.lexicon_size:
        n = int(rng.integers(cfg.word_len[0], cfg.word_len[1] + 1))
        words.add("".join(rng.choice(list(cfg.letters), size=n)))
    return sorted(words)


def render_utterance(text: str, templates: CorpusTemplates, rng: np.random.Generator,
                     uid: str, split: str, seed: int) -> Utterance:
    cfg = templates.cfg
    chars = SPACE + cfg.letters
    durs = rng.integers(cfg.dur_min, cfg.dur_max + 1, size=len(text))
    frame_chars = np.repeat([chars.index(c) for c in text], durs)
    spf = cfg.samples_per_frame
    wave = np.concatenate([templates.render_segment(c, int(d) * spf, rng) for c, d in zip(text, durs)])
    wave = wave + cfg.noise_floor * rng.normal(size=wave.size)
    T = len(frame_chars)
    vis_ids = np.full(T, templates.rest_viseme)
    lead = cfg.lead_frames
    ahead = frame_chars[lead:]
    vis_ids[:T - lead] = [templates.vmap.viseme_of(chars[i]) for i in ahead]
    visual = templates.viseme_templates[vis_ids] + cfg.visual_noise * rng.normal(size=(T, cfg.visual_dim))
    return Utterance(uid, split, text, wave.astype(np.float32), visual.astype(np.float32),
                     frame_chars.astype(np.int64), seed, lead)


def synth_corpus(cfg: SynthConfig, seed: int | None = None) -> Corpus:
    """Generate train/dev/test utterances; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    root = np.random.default_rng([seed, 0])
    templates = CorpusTemplates(cfg, root)
    lexicon = _lexicon(cfg, root)
    utts = []
    idx = 0
    for split, n in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        for _ in range(n):
            useed = seed * 1_000_003 + idx + 1
            rng = np.random.default_rng([seed, idx + 1])
            nw = int(rng.integers(cfg.words_per_utt[0], cfg.words_per_utt[1] + 1))
            text = SPACE.join(rng.choice(lexicon, size=nw))
            utts.append(render_utterance(text, templates, rng, f"{split}-{idx:05d}", split, useed))
            idx += 1
    return Corpus(cfg, utts, SPACE + cfg.letters)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.jsonl + corpus.json + arrays/<uid>.bin


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "arrays").mkdir(parents=True, exist_ok=True)
    (out / "corpus.json").write_text(json.dumps({"config": corpus.cfg.to_json(),
                                                 "characters": corpus.characters}, sort_keys=True, indent=1))
    lines = []
    for u in corpus.utterances:
        rel = f"arrays/{u.uid}.bin"
        save_arrays(out / rel, {"wave": u.wave, "visual": u.visual, "frame_chars": u.frame_chars})
        lines.append(json.dumps({"id": u.uid, "split": u.split, "text": u.text, "path": rel,
                                 "lead": u.lead, "seed": u.seed}, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(manifest) -> Corpus:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    root = manifest.parent
    info = json.loads((root / "corpus.json").read_text())
    cfg = SynthConfig.from_json(info["config"])
    utts = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        arrays, _ = load_arrays(root / rec["path"])
        utts.append(Utterance(rec["id"], rec["split"], rec["text"], arrays["wave"], arrays["visual"],
                              arrays["frame_chars"], rec["seed"], rec["lead"]))
    return Corpus(cfg, utts, info["characters"])
