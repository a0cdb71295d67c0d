"""Conformer building blocks and the factorized-excitation cross-modal variant.

All tensors are batch-first, ``(B, T, d)``.  ``mask`` is a boolean ``(B, T)``
array marking valid (non-padded) frames; ``None`` means all frames valid.
Weights are stored as ``(out, in)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FE_SLOTS = ("first", "second", "both")


@dataclass(frozen=True)
class ConformerConfig:
    d_a: int = 64
    d_k: int = 64
    d_ff: int = 256
    heads: int = 4
    conv_kernel: int = 7
    dropout: float = 0.0

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.d_k % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d_k={self.d_k}")


@dataclass(frozen=True)
class FEConfig:
    K: int = 8
    d_l: int = 32
    C: int = 12
    slot: str = "second"

    def __post_init__(self):
        if self.K < 1 or self.C < 2:
            raise ValueError(f"FEConfig needs K >= 1 and C >= 2, got K={self.K}, C={self.C}")
        if self.slot not in FE_SLOTS:
            raise ValueError(f"unknown FE slot {self.slot!r}; expected one of {FE_SLOTS}")

    @property
    def d_ff(self) -> int:
        return self.K * self.d_l

    def slots(self) -> tuple[str, ...]:
        return ("first", "second") if self.slot == "both" else (self.slot,)

    def check(self, conf: ConformerConfig) -> None:
        if self.d_l * self.K != conf.d_ff:
            raise ValueError(f"d_l*K = {self.d_l}*{self.K} = {self.d_l * self.K} != d_ff = {conf.d_ff}")


# ---------------------------------------------------------------------------
# initialisation


def _dense(rng, n_out: int, n_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))


def init_layer_norm(store, prefix: str, d: int) -> None:
    store.add(f"{prefix}.g", np.ones(d))
    store.add(f"{prefix}.b", np.zeros(d))


def init_linear(store, prefix: str, n_out: int, n_in: int, rng, bias: bool = True) -> None:
    store.add(f"{prefix}.w", _dense(rng, n_out, n_in))
    if bias:
        store.add(f"{prefix}.b", np.zeros(n_out))


def init_ffn(store, prefix: str, d_a: int, d_ff: int, rng) -> None:
    init_layer_norm(store, f"{prefix}.ln", d_a)
    store.add(f"{prefix}.w1", _dense(rng, d_ff, d_a))
    store.add(f"{prefix}.b1", np.zeros(d_ff))
    store.add(f"{prefix}.w2", _dense(rng, d_a, d_ff))
    store.add(f"{prefix}.b2", np.zeros(d_a))


def init_fe_factors(store, prefix: str, fe: FEConfig, rng, scale: float = 0.01) -> None:
    """Factor projection starting near the all-ones excitation."""
    store.add(f"{prefix}.w_rho", rng.normal(0.0, scale, size=(fe.K, fe.C)))
    store.add(f"{prefix}.b_rho", np.ones(fe.K))


def init_mhsa(store, prefix: str, conf: ConformerConfig, rng) -> None:
    d_a, d_k, h = conf.d_a, conf.d_k, conf.heads
    init_layer_norm(store, f"{prefix}.ln", d_a)
    for n in ("q", "k", "v"):
        init_linear(store, f"{prefix}.{n}", d_k, d_a, rng)
    init_linear(store, f"{prefix}.pos", d_k, d_k, rng, bias=False)
    store.add(f"{prefix}.pos_u", np.zeros((h, d_k // h)))
    store.add(f"{prefix}.pos_v", np.zeros((h, d_k // h)))
    init_linear(store, f"{prefix}.o", d_a, d_k, rng)


def init_conv_block(store, prefix: str, conf: ConformerConfig, rng) -> None:
    d, k = conf.d_a, conf.conv_kernel
    init_layer_norm(store, f"{prefix}.ln", d)
    init_linear(store, f"{prefix}.pw1", 2 * d, d, rng)
    store.add(f"{prefix}.dw.w", rng.normal(0.0, 1.0 / math.sqrt(k), size=(d, k)))
    store.add(f"{prefix}.dw.b", np.zeros(d))
    init_layer_norm(store, f"{prefix}.norm", d)
    init_linear(store, f"{prefix}.pw2", d, d, rng)


def init_conformer_block(store, prefix: str, conf: ConformerConfig, rng,
                         fe: FEConfig | None = None) -> None:
    """Register one block; with ``fe`` the chosen FFN slot(s) get factor weights."""
    if fe is not None:
        fe.check(conf)
    init_ffn(store, f"{prefix}.ffn1", conf.d_a, conf.d_ff, rng)
    init_mhsa(store, f"{prefix}.mhsa", conf, rng)
    init_conv_block(store, f"{prefix}.conv", conf, rng)
    init_ffn(store, f"{prefix}.ffn2", conf.d_a, conf.d_ff, rng)
    init_layer_norm(store, f"{prefix}.ln_out", conf.d_a)
    if fe is not None:
        for slot in fe.slots():
            init_fe_factors(store, f"{prefix}.{_ffn_name(slot)}", fe, rng)


def _ffn_name(slot: str) -> str:
    return "ffn1" if slot == "first" else "ffn2"


# ---------------------------------------------------------------------------
# forward passes


def ln(x: Tensor, p) -> Tensor:
    return ad.layer_norm(x, p["g"], p["b"])


def ffn_forward(x: Tensor, p) -> Tensor:
    """W2 · swish(W1 x + B1) + B2 applied per frame."""
    return ad.linear(ad.silu(ad.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def fe_subspaces(x: Tensor, rho: Tensor, p, K: int) -> Tensor:
    """Pre-activation concat of SA_{t,k} = rho'_{t,k} ω_k x_t + b_k."""
    w1 = p["w1"]
    d_ff = w1.shape[0]
    if d_ff % K:
        raise ShapeError(f"fe_ffn: d_ff={d_ff} is not divisible by K={K}")
    if rho.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"fe_ffn: rho {rho.shape} does not align with input {x.shape}")
    factors = ad.linear(rho, p["w_rho"], p["b_rho"])  # (..., K)
    proj = ad.linear(x, w1)  # stacked ω_k, (..., d_ff)
    lead = x.shape[:-1]
    scaled = proj.reshape(lead + (K, d_ff // K)) * factors.reshape(lead + (K, 1))
    return scaled.reshape(lead + (d_ff,)) + p["b1"]


def fe_ffn_forward(x: Tensor, rho: Tensor, p, K: int) -> Tensor:
    return ad.linear(ad.silu(fe_subspaces(x, rho, p, K)), p["w2"], p["b2"])


def sinusoid_table(positions: np.ndarray, d: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    inv = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    ang = positions[..., None] * inv
    out = np.zeros(positions.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang[..., : d // 2])
    return out


def _heads(x: Tensor, h: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _key_mask(mask, B: int, T: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, T):
        raise ShapeError(f"mask {mask.shape} does not match input frames {(B, T)}")
    return mask[:, None, None, :]


def mhsa_forward(x: Tensor, p, heads: int, mask=None, positions=None, rng=None,
                 dropout: float = 0.0) -> Tensor:
    """Multi-head self-attention with relative positional scores.

    The default path skews the (T, 2T-1) score table; passing explicit
    ``positions`` gathers per-pair distances directly, which is the
    reference the skew is checked against.
    """
    B, T, _ = x.shape
    q = _heads(ad.linear(x, p["q.w"], p["q.b"]), heads)
    k = _heads(ad.linear(x, p["k.w"], p["k.b"]), heads)
    v = _heads(ad.linear(x, p["v.w"], p["v.b"]), heads)
    d_k = p["q.w"].shape[0]
    dh = d_k // heads
    u = p["pos_u"].reshape(1, heads, 1, dh)
    w = p["pos_v"].reshape(1, heads, 1, dh)
    content = (q + u) @ k.transpose(0, 1, 3, 2)
    if positions is None:
        dist = np.arange(T - 1, -T, -1)
        pe = Tensor(sinusoid_table(dist, d_k).astype(x.dtype))
        pk = ad.linear(pe, p["pos.w"]).reshape(2 * T - 1, heads, dh).transpose(1, 2, 0)
        position = ad.rel_shift((q + w) @ pk.reshape(1, heads, dh, 2 * T - 1))
    else:
        pos = np.asarray(positions, dtype=np.float64)
        pe = Tensor(sinusoid_table(pos[:, None] - pos[None, :], d_k).astype(x.dtype))
        pk = ad.linear(pe, p["pos.w"]).reshape(T, T, heads, dh).transpose(2, 0, 3, 1)
        # (1,h,T,1,dh) @ (1,h,T,dh,T) -> per-query row of distances
        qw = (q + w).reshape(B, heads, T, 1, dh)
        position = (qw @ pk.reshape(1, heads, T, dh, T)).reshape(B, heads, T, T)
    scores = (content + position) * (1.0 / math.sqrt(dh))
    km = _key_mask(mask, B, T)
    if km is not None:
        scores = ad.where(km, scores, -1e9)
    attn = ad.dropout(ad.softmax(scores, axis=-1), dropout, rng)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d_k)
    return ad.linear(ctx, p["o.w"], p["o.b"])


def _zero_pads(x: Tensor, mask) -> Tensor:
    if mask is None:
        return x
    return x * np.asarray(mask, dtype=x.dtype)[..., None]


def conv_block_forward(x: Tensor, p, mask=None, rng=None, dropout: float = 0.0) -> Tensor:
    """Pointwise+GLU, depthwise, norm, swish, pointwise, then the skip add."""
    y = ad.glu(ad.linear(ln(x, p.view("ln")), p["pw1.w"], p["pw1.b"]))
    y = ad.depthwise_conv1d(_zero_pads(y, mask), p["dw.w"], p["dw.b"])
    y = ad.silu(ln(y, p.view("norm")))
    y = ad.linear(y, p["pw2.w"], p["pw2.b"])
    return x + ad.dropout(y, dropout, rng)


def conformer_block_forward(x: Tensor, p, conf: ConformerConfig, mask=None, rho: Tensor | None = None,
                            fe: FEConfig | None = None, rng=None) -> Tensor:
    """Macaron Conformer block; with ``fe`` and ``rho`` it is the cross-modal block."""
    slots = fe.slots() if fe is not None else ()
    if slots and rho is None:
        raise ValueError("cross-modal block needs the visual embedding")
    if rho is not None and rho.shape[:2] != x.shape[:2]:
        raise ShapeError(f"visual embedding frames {rho.shape[:2]} do not match audio {x.shape[:2]}")
    drop = conf.dropout if rng is not None else 0.0

    def half_ffn(h, name, slot):
        q = p.view(name)
        z = ln(h, q.view("ln"))
        out = fe_ffn_forward(z, rho, q, fe.K) if slot in slots else ffn_forward(z, q)
        return h + 0.5 * ad.dropout(out, drop, rng)

    x = half_ffn(x, "ffn1", "first")
    att = mhsa_forward(ln(x, p.view("mhsa.ln")), p.view("mhsa"), conf.heads, mask=mask)
    x = x + ad.dropout(att, drop, rng)
    x = conv_block_forward(x, p.view("conv"), mask=mask, rng=rng, dropout=drop)
    x = half_ffn(x, "ffn2", "second")
    return ln(x, p.view("ln_out"))


def cross_modal_block_forward(x: Tensor, rho: Tensor, p, conf: ConformerConfig, fe: FEConfig,
                              mask=None, rng=None) -> Tensor:
    return conformer_block_forward(x, p, conf, mask=mask, rho=rho, fe=fe, rng=rng)



# ---------------------------------------------------------------------------
# plain attention for the decoder and the language model


def init_mha(store, prefix: str, d: int, rng) -> None:
    for n in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{n}", d, d, rng)


def mha_forward(query: Tensor, memory: Tensor, p, heads: int, key_mask=None, causal: bool = False) -> Tensor:
    """Scaled dot-product attention of ``query`` (B, L, d) over ``memory`` (B, S, d)."""
    B, L, d = query.shape
    S = memory.shape[1]
    dh = d // heads
    q = _heads(ad.linear(query, p["q.w"], p["q.b"]), heads)
    k = _heads(ad.linear(memory, p["k.w"], p["k.b"]), heads)
    v = _heads(ad.linear(memory, p["v.w"], p["v.b"]), heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    allowed = np.ones((B, 1, L, S), dtype=bool)
    if key_mask is not None:
        allowed = allowed & np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        allowed = allowed & np.tril(np.ones((L, S), dtype=bool))[None, None]
    if key_mask is not None or causal:
        scores = ad.where(allowed, scores, -1e9)
    ctx = (ad.softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return ad.linear(ctx, p["o.w"], p["o.b"])
