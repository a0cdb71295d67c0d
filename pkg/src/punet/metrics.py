"""Error rates via Levenshtein alignment, the cosine-similarity robustness profile, reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import NO_NOISE, mix_at_snr

DEFAULT_SNR_GRID = (20.0, 15.0, 10.0, 5.0, 0.0, -5.0)


@dataclass(frozen=True)
class EditOps:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(hyp, ref) -> EditOps:
    """Unit-cost Levenshtein distance with one optimal alignment's operation counts."""
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, s, ins, dele = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditOps(int(d[n, m]), int(s), ins, dele)


def words(text: str) -> list[str]:
    return text.split()


def _rate(hyp, ref) -> float:
    if len(ref) == 0:
        raise ValueError("error rate undefined for an empty reference")
    return edit_distance(hyp, ref).distance / len(ref)


def wer(hyp: str, ref: str) -> float:
    return _rate(words(hyp), words(ref))


def cer(hyp: str, ref: str) -> float:
    return _rate(list(hyp), list(ref))


@dataclass
class ErrorSummary:
    n_utts: int
    word_errors: int
    n_words: int
    char_errors: int
    n_chars: int

    @property
    def wer(self) -> float:
        return self.word_errors / self.n_words if self.n_words else float("nan")

    @property
    def cer(self) -> float:
        return self.char_errors / self.n_chars if self.n_chars else float("nan")

    def as_dict(self) -> dict:
        return {"utterances": self.n_utts, "word_errors": self.word_errors, "words": self.n_words,
                "char_errors": self.char_errors, "chars": self.n_chars, "wer": self.wer, "cer": self.cer}


def summarize(pairs) -> ErrorSummary:
    """Corpus-level rates: summed distances over summed reference lengths."""
    s = ErrorSummary(0, 0, 0, 0, 0)
    for hyp, ref in pairs:
        s.n_utts += 1
        s.word_errors += edit_distance(words(hyp), words(ref)).distance
        s.n_words += len(words(ref))
        s.char_errors += edit_distance(list(hyp), list(ref)).distance
        s.n_chars += len(ref)
    return s


# ---------------------------------------------------------------------------
# cosine similarity between clean- and noisy-input representations


def frame_cosines(R: np.ndarray, R_noisy: np.ndarray, eps: float = 0.0) -> tuple[np.ndarray, int]:
    """Per-frame cosine similarity; frames where either vector has zero norm are skipped."""
    R = np.asarray(R, dtype=np.float64)
    Rn = np.asarray(R_noisy, dtype=np.float64)
    if R.shape != Rn.shape:
        raise ValueError(f"representation shapes differ: {R.shape} vs {Rn.shape}")
    na = np.linalg.norm(R, axis=-1)
    nb = np.linalg.norm(Rn, axis=-1)
    ok = (na > eps) & (nb > eps)
    theta = (R[ok] * Rn[ok]).sum(axis=-1) / (na[ok] * nb[ok])
    return np.clip(theta, -1.0, 1.0), int((~ok).sum())


@dataclass
class SimilarityProfile:
    snrs: list  # descending
    mean_theta: list
    n_utts: int
    skipped_frames: int = 0
    per_utterance: dict = field(default_factory=dict)  # snr -> list of per-utterance means

    def at(self, snr) -> float:
        for s, v in zip(self.snrs, self.mean_theta):
            if s == snr:
                return v
        raise KeyError(f"SNR {snr} not in profile grid {self.snrs}")

    def is_monotone(self) -> bool:
        """True when similarity never rises as SNR falls."""
        return all(b <= a for a, b in zip(self.mean_theta, self.mean_theta[1:]))


def _grid(snrs) -> list:
    grid = list(snrs)
    if not grid:
        raise ValueError("empty SNR grid")
    clean = [s for s in grid if s is NO_NOISE]
    nums = sorted((float(s) for s in grid if s is not NO_NOISE), reverse=True)
    if len(set(nums)) != len(nums) or len(clean) > 1:
        raise ValueError(f"duplicate SNRs in grid {grid}")
    return clean + nums


def cosine_profile(represent, utterances, snrs=DEFAULT_SNR_GRID, noise=None, keep_per_utterance=False,
                   seed: int = 0) -> SimilarityProfile:
    """Mean over utterances of the mean over frames of cos(R_t, R'_t) at each SNR.

    ``represent(wave, visual)`` returns the (T, d) context representation of
    a frozen model; ``utterances`` yields ``(wave, visual)`` pairs; ``noise``
    is a waveform that each utterance draws a random segment from.
    """
    grid = _grid(snrs)
    utterances = list(utterances)
    if not utterances:
        raise ValueError("cosine_profile: no utterances")
    if noise is None and any(s is not NO_NOISE for s in grid):
        raise ValueError("cosine_profile: noisy SNRs need a noise source")
    rng = np.random.default_rng(seed)
    offsets = [int(rng.integers(0, max(len(noise), 1))) if noise is not None else 0 for _ in utterances]
    sums = {s: [] for s in grid}
    skipped = 0
    for (wave, visual), off in zip(utterances, offsets):
        clean = np.asarray(represent(wave, visual))
        for s in grid:
            if s is NO_NOISE:
                noisy = clean
            else:
                seg = np.roll(np.asarray(noise), -off)
                noisy = np.asarray(represent(mix_at_snr(wave, seg, s), visual))
            theta, k = frame_cosines(clean, noisy)
            skipped += k
            if theta.size:
                sums[s].append(float(theta.mean()))
    means = [float(np.mean(sums[s])) if sums[s] else float("nan") for s in grid]
    return SimilarityProfile(grid, means, len(utterances), skipped,
                             {s: sums[s] for s in grid} if keep_per_utterance else {})


# ---------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if v is None:
        return "clean"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(header, rows) -> str:
    """Plain-text, space-aligned table."""
    cells = [[_fmt(h) for h in header]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_records(records) -> str:
    """One ``key=value`` record per line, keys in insertion order."""
    out = []
    for rec in records:
        parts = []
        for k, v in rec.items():
            text = _fmt(v) if not isinstance(v, float) else repr(v)
            if any(ch.isspace() for ch in text) or "=" in text:
                text = '"' + text.replace('"', '\\"') + '"'
            parts.append(f"{k}={text}")
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def profile_rows(name: str, profile: SimilarityProfile) -> list:
    return [name] + profile.mean_theta


def render_report(header, rows, fmt: str = "table") -> str:
    if fmt == "table":
        return format_table(header, rows)
    if fmt == "records":
        return format_records([dict(zip([_fmt(h) for h in header], r)) for r in rows])
    raise ValueError(f"unknown report format {fmt!r}; use table or records")
