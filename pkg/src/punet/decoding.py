"""Joint CTC / attention / LM beam search and greedy baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 20
    gamma: float = 0.1  # decoder weight; CTC gets 1 - gamma
    psi: float = 0.6  # LM weight
    maxlen_ratio: float = 1.0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam width must be >= 1, got {self.beam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.psi < 0.0:
            raise ValueError(f"psi must be >= 0, got {self.psi}")
        if self.maxlen_ratio <= 0.0:
            raise ValueError(f"maxlen_ratio must be positive, got {self.maxlen_ratio}")


@dataclass
class Hypothesis:
    tokens: tuple  # starts with [sos]; finished ones end with [sos] as eos
    dec: float
    ctc: float
    lm: float
    score: float
    state: np.ndarray | None = None  # (T, 2) log forward variables: non-blank, blank ending

    def key(self):
        return (-self.score, self.tokens)


@dataclass
class DecodeResult:
    tokens: list  # without [sos]/[eos]
    score: float
    ctc: float
    dec: float
    lm: float
    finished: bool
    trace: list = field(default_factory=list)  # best live joint score per step

    @property
    def truncated(self) -> bool:
        return not self.finished


def _weighted(cfg: DecodeConfig, ctc, dec, lm):
    """Joint score; zero-weight terms are dropped so that 0 * -inf never occurs."""
    total = 0.0
    if cfg.gamma < 1.0:
        total = total + (1.0 - cfg.gamma) * ctc
    if cfg.gamma > 0.0:
        total = total + cfg.gamma * dec
    if cfg.psi > 0.0:
        total = total + cfg.psi * lm
    return total


class CTCPrefixScorer:
    """Incremental CTC prefix probabilities over one utterance's frame log-probs."""

    def __init__(self, log_probs: np.ndarray, blank: int = 0, eos: int = 1):
        self.x = np.asarray(log_probs, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("ctc log-probs must be (T, C)")
        self.T, self.C = self.x.shape
        self.blank, self.eos = blank, eos

    def initial_state(self) -> np.ndarray:
        st = np.full((self.T, 2), NEG_INF)
        st[:, 1] = np.cumsum(self.x[:, self.blank])
        return st

    def extend(self, states: np.ndarray, last: np.ndarray, cands: np.ndarray, at_start: np.ndarray):
        """Score every (hypothesis, candidate) pair.

        ``states`` (H, T, 2); ``last`` (H,) last token of each prefix;
        ``cands`` (M,) candidate tokens; ``at_start`` (H,) True when the
        prefix is only [sos].  Returns prefix log-probs (H, M) and the new
        forward variables (H, M, T, 2).  The eos candidate gets the
        probability of the prefix being complete.
        """
        H, M, T = states.shape[0], cands.size, self.T
        xc = self.x[:, cands]  # (T, M)
        xb = self.x[:, self.blank]
        total = np.logaddexp(states[..., 0], states[..., 1])  # (H, T)
        same = last[:, None] == cands[None, :]
        phi = np.where(same[:, None, :], states[:, :, 1][:, :, None], total[:, :, None])  # (H, T, M)
        r = np.full((H, M, T, 2), NEG_INF)
        r[:, :, 0, 0] = np.where(at_start[:, None], xc[0][None, :], NEG_INF)
        psi = r[:, :, 0, 0].copy()
        for t in range(1, T):
            prev = phi[:, t - 1, :]
            r[:, :, t, 0] = np.logaddexp(r[:, :, t - 1, 0], prev) + xc[t][None, :]
            r[:, :, t, 1] = np.logaddexp(r[:, :, t - 1, 0], r[:, :, t - 1, 1]) + xb[t]
            psi = np.logaddexp(psi, prev + xc[t][None, :])
        is_eos = cands == self.eos
        if is_eos.any():
            psi[:, is_eos] = total[:, -1][:, None]
        return psi, r


def ctc_prefix_logprob(log_probs: np.ndarray, prefix, blank: int = 0) -> float:
    """log P(the collapsed output starts with ``prefix``), computed from scratch.

    Sums, over the frame at which the last prefix label is first emitted, the
    forward probability of reaching it; frames after it are unconstrained.
    """
    x = np.asarray(log_probs, dtype=np.float64)
    T = x.shape[0]
    prefix = [int(c) for c in prefix]
    if not prefix:
        return 0.0
    ext = [blank]
    for c in prefix:
        ext += [c, blank]
    S = len(ext)
    last_state = S - 2
    alpha = np.full(S, NEG_INF)
    alpha[0] = x[0, blank]
    alpha[1] = x[0, ext[1]]
    out = alpha[last_state] if last_state == 1 else NEG_INF
    for t in range(1, T):
        new = np.full(S, NEG_INF)
        for s in range(S):
            terms = [alpha[s]]
            if s >= 1:
                terms.append(alpha[s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                terms.append(alpha[s - 2])
            new[s] = np.logaddexp.reduce(terms) + x[t, ext[s]]
        # first arrival at the last label: from any state but itself
        entry = [alpha[last_state - 1]]
        if last_state >= 2 and ext[last_state] != ext[last_state - 2]:
            entry.append(alpha[last_state - 2])
        out = np.logaddexp(out, np.logaddexp.reduce(entry) + x[t, ext[last_state]])
        alpha = new
    return float(out)


def joint_beam_search(ctc_log_probs, dec_fn, lm_fn, cfg: DecodeConfig, sos: int, blank: int = 0,
                      n_frames: int | None = None) -> DecodeResult:
    """Label-synchronous search over ``(1-gamma) ctc + gamma dec + psi lm``.

    ``dec_fn(prefixes)`` and ``lm_fn(prefixes)`` map a list of equal-length
    token lists (each starting with [sos]) to (H, C) next-token log-probs.
    Every term is a log-probability of a growing prefix, so a child never
    outscores its parent; the search stops once no live hypothesis can beat
    the best finished one.
    """
    x = None if ctc_log_probs is None else np.asarray(ctc_log_probs, dtype=np.float64)
    if x is None and cfg.gamma < 1.0:
        raise ValueError("joint_beam_search: CTC log-probs required when gamma < 1")
    if cfg.psi > 0.0 and lm_fn is None:
        raise ValueError("joint_beam_search: psi > 0 needs a language model")
    if dec_fn is None and cfg.gamma > 0.0:
        raise ValueError("joint_beam_search: gamma > 0 needs a decoder")
    T = n_frames if n_frames is not None else x.shape[0]
    C = x.shape[1] if x is not None else None
    maxlen = max(1, int(math.floor(cfg.maxlen_ratio * T)))
    scorer = CTCPrefixScorer(x, blank=blank, eos=sos) if x is not None and cfg.gamma < 1.0 else None

    live = [Hypothesis((sos,), 0.0, 0.0, 0.0, 0.0, scorer.initial_state() if scorer else None)]
    finished: list[Hypothesis] = []
    trace = []
    for step in range(maxlen + 1):
        prefixes = [list(h.tokens) for h in live]
        dec = dec_fn(prefixes) if cfg.gamma > 0.0 else None
        lm = lm_fn(prefixes) if cfg.psi > 0.0 else None
        if C is None:
            C = dec.shape[1]
        cands = np.array([c for c in range(C) if c != blank], dtype=np.int64)
        if step == maxlen:  # length bound reached: only eos may follow
            cands = np.array([sos], dtype=np.int64)
        H, M = len(live), cands.size
        ctc_new = np.zeros((H, M))
        states = None
        if scorer is not None:
            st = np.stack([h.state for h in live])
            last = np.array([h.tokens[-1] for h in live])
            at_start = np.array([len(h.tokens) == 1 for h in live])
            ctc_new, states = scorer.extend(st, last, cands, at_start)
        dec_sum = np.array([h.dec for h in live])[:, None] + (dec[:, cands] if dec is not None else 0.0)
        lm_sum = np.array([h.lm for h in live])[:, None] + (lm[:, cands] if lm is not None else 0.0)
        joint = _weighted(cfg, ctc_new, dec_sum, lm_sum)
        joint = np.broadcast_to(joint, (H, M))
        order = sorted(((-joint[i, j], live[i].tokens + (int(cands[j]),), i, j)
                        for i in range(H) for j in range(M) if np.isfinite(joint[i, j])))
        nxt = []
        for neg, toks, i, j in order[:cfg.beam]:
            hyp = Hypothesis(toks, float(np.broadcast_to(dec_sum, (H, M))[i, j]),
                             float(ctc_new[i, j]), float(np.broadcast_to(lm_sum, (H, M))[i, j]), -neg,
                             None if states is None else states[i, j])
            (finished if toks[-1] == sos else nxt).append(hyp)
        if nxt:
            trace.append(nxt[0].score)
        if not nxt:
            break  # keep the last live set for a truncated result
        live = nxt
        if finished and max(h.score for h in finished) >= live[0].score:
            break
    if finished:
        best = min(finished, key=Hypothesis.key)
        return DecodeResult(list(best.tokens[1:-1]), best.score, best.ctc, best.dec, best.lm, True, trace)
    best = min(live, key=Hypothesis.key)
    return DecodeResult(list(best.tokens[1:]), best.score, best.ctc, best.dec, best.lm, False, trace)


def greedy_ctc_decode(log_probs, blank: int = 0) -> list:
    """Frame-wise argmax, merge repeats, drop blanks."""
    path = np.argmax(np.asarray(log_probs), axis=-1)
    out, prev = [], None
    for s in path:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def greedy_attention_decode(dec_fn, sos: int, maxlen: int, blank: int = 0) -> DecodeResult:
    """Repeatedly append the decoder's argmax token until eos or ``maxlen`` tokens."""
    prefix, total = [sos], 0.0
    for _ in range(maxlen + 1):
        lp = np.asarray(dec_fn([prefix])[0], dtype=np.float64).copy()
        lp[blank] = NEG_INF
        if len(prefix) > maxlen:
            tok = sos
        else:
            tok = int(np.argmax(lp))
        total += float(lp[tok])
        if tok == sos:
            return DecodeResult(prefix[1:], total, 0.0, total, 0.0, True)
        prefix.append(tok)
    return DecodeResult(prefix[1:], total, 0.0, total, 0.0, False)


# ---------------------------------------------------------------------------
# model adapters


def model_decoder_fn(model, R, mem_mask=None):
    """Batched next-token scorer for an :class:`AVSRModel` and one utterance's ``R`` (T, d)."""
    from . import autodiff as ad
    from .model import decoder_forward

    def fn(prefixes):
        H = len(prefixes)
        mem = ad.Tensor(np.broadcast_to(R.data if hasattr(R, "data") else R, (H,) + tuple(R.shape[-2:])))
        with ad.no_grad():
            return decoder_forward(mem, prefixes, model.params, model.cfg).data[:, -1].astype(np.float64)
    return fn


def lm_fn_for(lm):
    from . import autodiff as ad

    def fn(prefixes):
        with ad.no_grad():
            out = lm.forward(prefixes).data[:, -1].astype(np.float64)
        out[:, lm.vocab.blank] = NEG_INF
        return out
    return fn


# ---------------------------------------------------------------------------
# per-utterance records

RECORD_FIELDS = ("id", "hyp", "ref", "joint", "ctc", "dec", "lm", "finished")


def format_record(uid: str, hyp: str, ref: str, result: DecodeResult) -> str:
    for name, text in (("id", uid), ("hyp", hyp), ("ref", ref)):
        if "\t" in text or "\n" in text:
            raise ValueError(f"record field {name} contains a tab or newline")
    vals = [uid, hyp, ref] + [repr(float(v)) for v in (result.score, result.ctc, result.dec, result.lm)] + [
        "1" if result.finished else "0"]
    return "\t".join(vals)


def write_records(path, rows) -> None:
    """``rows``: iterable of (id, hyp, ref, DecodeResult)."""
    lines = ["#" + "\t".join(RECORD_FIELDS)] + [format_record(*r) for r in rows]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != len(RECORD_FIELDS):
                raise ValueError(f"malformed record line: {line!r}")
            rec = dict(zip(RECORD_FIELDS, parts))
            for k in ("joint", "ctc", "dec", "lm"):
                rec[k] = float(rec[k])
            rec["finished"] = rec["finished"] == "1"
            out.append(rec)
    return out
