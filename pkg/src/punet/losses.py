"""CTC (log-space forward-backward), attention cross-entropy and the hybrid objective."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, logsumexp_np

NEG_INF = -np.inf


def ctc_min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_feasible(target, n_frames: int) -> bool:
    return ctc_min_frames(target) <= n_frames


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)) + safe


def _ctc_tables(lp: np.ndarray, lengths: np.ndarray, targets, blank: int):
    """Alpha/beta tables over blank-interleaved labels; emissions included at t."""
    B, T, C = lp.shape
    L = np.array([len(t) for t in targets])
    S = 2 * L + 1
    Smax = max(int(S.max()), 2)
    ext = np.full((B, Smax), blank, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
    valid = np.arange(Smax)[None, :] < S[:, None]
    skip = np.zeros((B, Smax), dtype=bool)  # may enter s from s-2
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, Smax)), axis=2)  # (B,T,S)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((T, B, Smax), NEG_INF)
    alpha[0, :, 0] = emit[:, 0, 0]
    has1 = S > 1
    alpha[0, has1, 1] = emit[has1, 0, 1]
    for t in range(1, T):
        a = alpha[t - 1]
        a1 = np.concatenate([np.full((B, 1), NEG_INF), a[:, :-1]], axis=1)
        a2 = np.concatenate([np.full((B, 2), NEG_INF), a[:, :-2]], axis=1)
        a2 = np.where(skip, a2, NEG_INF)
        alpha[t] = _lse3(a, a1, a2) + emit[:, t]

    beta = np.full((T, B, Smax), NEG_INF)
    rows = np.arange(B)
    skip_next = np.zeros((B, Smax), dtype=bool)  # may go from s to s+2
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 1, -1, -1):
        start = lengths - 1 == t
        later = np.full((B, Smax), NEG_INF)
        if t + 1 < T:
            nb = beta[t + 1]
            b1 = np.concatenate([nb[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
            b2 = np.concatenate([nb[:, 2:], np.full((B, 2), NEG_INF)], axis=1)
            b2 = np.where(skip_next, b2, NEG_INF)
            later = _lse3(nb, b1, b2) + emit[:, t]
        init = np.full((B, Smax), NEG_INF)
        init[rows, S - 1] = emit[rows, t, S - 1]
        two = S > 1
        init[rows[two], S[two] - 2] = emit[rows[two], t, S[two] - 2]
        beta[t] = np.where(start[:, None], init, np.where((t < lengths - 1)[:, None], later, NEG_INF))

    last = alpha[lengths - 1, rows]  # (B, Smax)
    end1 = last[rows, S - 1]
    end2 = np.where(S > 1, last[rows, np.maximum(S - 2, 0)], NEG_INF)
    logp = np.logaddexp(end1, end2)
    return alpha, beta, emit, ext, logp


def ctc_loss(log_probs: Tensor, targets, lengths=None, blank: int = 0) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, C) of normalised log-probabilities.  Targets that
    cannot fit in their frame count give +inf and a zero gradient.
    """
    B, T, C = log_probs.shape
    if len(targets) != B:
        raise ValueError(f"ctc_loss: {len(targets)} targets for batch of {B}")
    targets = [list(map(int, t)) for t in targets]
    for t in targets:
        if blank in t:
            raise ValueError("ctc_loss: target contains [blank]")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    lp = log_probs.data.astype(np.float64)
    alpha, beta, emit, ext, logp = _ctc_tables(lp, lengths, targets, blank)
    feasible = np.array([ctc_feasible(t, n) for t, n in zip(targets, lengths)])
    nll = np.where(feasible, -logp, np.inf)

    def bw(g):
        # occupation of each extended state, divided back by its emission
        with np.errstate(invalid="ignore"):
            post = alpha + beta - np.transpose(emit, (1, 0, 2)) - np.where(feasible, logp, 0.0)[None, :, None]
        occ = np.where(np.isfinite(post), np.exp(post), 0.0)  # (T, B, S)
        onehot = np.zeros(ext.shape + (C,))
        np.put_along_axis(onehot, ext[..., None], 1.0, axis=2)
        onehot[~(np.arange(ext.shape[1])[None, :] < (2 * np.array([len(t) for t in targets]) + 1)[:, None])] = 0.0
        grad = -np.einsum("tbs,bsc->btc", occ, onehot)
        tmask = np.arange(T)[None, :] < lengths[:, None]
        grad = grad * tmask[..., None] * (feasible * np.where(np.isfinite(g), g, 0.0))[:, None, None]
        return (grad.astype(log_probs.dtype),)

    return ad.make_op(nll.astype(log_probs.dtype), (log_probs,), bw, "ctc_loss", finite=False)


def ctc_forward_loss(log_probs: Tensor, target, blank: int = 0) -> Tensor:
    """Scalar CTC negative log-likelihood for one utterance, (T, C) input."""
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    T, C = lp.shape
    return ctc_loss(lp.reshape(1, T, C), [target], blank=blank).reshape(())


_FLOOR = -1e30  # stands in for log 0 inside the graph route


def _graph_lse(x: Tensor, axis: int) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)  # constant shift, cancels in the gradient
    return ad.log(ad.tsum(ad.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def ctc_graph_loss(log_probs: Tensor, target, blank: int = 0) -> Tensor:
    """CTC negative log-likelihood built from autodiff primitives, one frame at a time.

    Independent of the table-based forward-backward in :func:`ctc_loss`; its
    gradient comes from the generic graph, so the two routes cross-check.
    """
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    T, _ = lp.shape
    target = [int(t) for t in target]
    if not ctc_feasible(target, T):
        return Tensor(np.inf)
    ext = [blank]
    for y in target:
        ext += [y, blank]
    S = len(ext)
    skip = np.array([s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] for s in range(S)])
    emit = lp[:, np.array(ext)]  # (T, S)
    alpha = ad.where(np.arange(S) < 2, emit[0], _FLOOR)  # start in the first blank or first label
    pad1 = Tensor(np.full(1, _FLOOR))
    pad2 = Tensor(np.full(2, _FLOOR))
    for t in range(1, T):
        a1 = ad.concat([pad1, alpha[:-1]], axis=0) if S > 1 else pad1
        a2 = ad.where(skip, ad.concat([pad2, alpha[:-2]], axis=0), _FLOOR) if S > 2 else None
        parts = [alpha, a1] + ([a2] if a2 is not None else [])
        stacked = ad.concat([q.reshape(1, S) for q in parts], axis=0)
        alpha = _graph_lse(stacked, axis=0) + emit[t]
    tail = alpha[S - 2:] if S > 1 else alpha
    return -_graph_lse(tail, axis=0)


def collapse(path, blank: int = 0) -> list:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force_oracle(log_probs, target, blank: int = 0, max_frames: int = 10,
                           max_classes: int = 6) -> float:
    """-log of the summed probability of every frame path collapsing to ``target``."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, C = lp.shape
    if T > max_frames or C > max_classes:
        raise ValueError(f"brute force limited to T<={max_frames}, C<={max_classes}; got T={T}, C={C}")
    target = [int(t) for t in target]
    L = len(target)
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != blank) & (paths != prev)
    counts = keep.sum(axis=1)
    rows = counts == L
    if L == 0:
        hit = rows
    else:
        labels = paths[rows][keep[rows]].reshape(-1, L)
        hit = np.zeros(paths.shape[0], dtype=bool)
        hit[np.flatnonzero(rows)] = (labels == np.asarray(target)).all(axis=1)
    if not hit.any():
        return float("inf")
    scores = lp[np.arange(T)[None, :], paths[hit]].sum(axis=1)
    return float(-logsumexp_np(scores))


def attention_ce_loss(log_probs: Tensor, targets, smoothing: float = 0.0, reduction: str = "mean",
                      mask=None) -> Tensor:
    """Label-smoothed NLL of teacher-forced decoder outputs.

    ``log_probs`` is (L+1, C) or (B, L+1, C); ``targets`` holds the shifted
    sequence ending in [eos].  Per token the loss is
    ``(1-eps) * -log p[y] + eps * mean_c(-log p[c])``.  ``reduction`` is
    ``mean`` (over tokens), ``sum`` or ``utterance`` (per-utterance sums).
    """
    single = log_probs.ndim == 2
    lp = log_probs.reshape(1, *log_probs.shape) if single else log_probs
    tg = np.asarray(targets, dtype=np.int64)
    tg = tg[None] if tg.ndim == 1 else tg
    if tg.shape != lp.shape[:2]:
        raise ValueError(f"attention_ce_loss: targets {tg.shape} do not match outputs {lp.shape[:2]}")
    m = np.ones(tg.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    C = lp.shape[-1]
    onehot = np.zeros(lp.shape, dtype=lp.dtype)
    np.put_along_axis(onehot, tg[..., None], 1.0, axis=-1)
    weights = (1.0 - smoothing) * onehot + smoothing / C
    per_token = -(lp * (weights * m[..., None])).sum(axis=-1)  # (B, L+1)
    if reduction == "mean":
        return per_token.sum() * (1.0 / max(int(m.sum()), 1))
    if reduction == "sum":
        return per_token.sum()
    if reduction == "utterance":
        return per_token.sum(axis=-1)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossBreakdown:
    ctc_nll: Tensor
    att_nll: Tensor
    lam: float
    total: Tensor

    def values(self) -> dict:
        return {"ctc": float(np.mean(self.ctc_nll.data)), "att": float(np.mean(self.att_nll.data)),
                "lambda": self.lam, "total": float(np.mean(self.total.data))}


def hybrid_loss(ctc_nll: Tensor, att_nll: Tensor, lam: float) -> LossBreakdown:
    """total = lam * ctc + (1 - lam) * att; a zero weight drops its term entirely."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"hybrid_loss: lambda must lie in [0, 1], got {lam}")
    ctc_nll, att_nll = ad.as_tensor(ctc_nll), ad.as_tensor(att_nll)
    if lam == 1.0:
        total = ctc_nll * 1.0
    elif lam == 0.0:
        total = att_nll * 1.0
    else:
        total = ctc_nll * lam + att_nll * (1.0 - lam)
    return LossBreakdown(ctc_nll, att_nll, lam, total)
