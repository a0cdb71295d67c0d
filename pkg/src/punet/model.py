"""Predictor, update encoder, decoder, character LM and the Feat Concat baseline."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .blocks import (ConformerConfig, FEConfig, conformer_block_forward, init_conformer_block,
                     init_layer_norm, init_linear, init_ffn, init_mha, ffn_forward, ln, mha_forward,
                     sinusoid_table)
from .features import init_subsampler, subsample4x
from .params import ParamStore

BLANK, SOS, SPACE, PRIME = "<blank>", "<sos>", " ", "'"


class Vocabulary:
    """Ordered token list with reserved [blank] and [sos] (also used as end)."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.blank = self.index[BLANK]
        self.sos = self.index[SOS]
        self.space = self.index.get(SPACE)
        self.prime = self.index.get(PRIME)

    @classmethod
    def from_characters(cls, chars: str) -> "Vocabulary":
        return cls([BLANK, SOS] + sorted(set(chars), key=chars.index))

    @classmethod
    def full_scale(cls) -> "Vocabulary":
        letters = [chr(c) for c in range(ord("A"), ord("Z") + 1)]
        digits = [str(d) for d in range(10)]
        return cls([BLANK] + letters + digits + [SPACE, PRIME, SOS])

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> int:
        return self.sos

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            if ch not in self.index or ch in (BLANK, SOS):
                raise KeyError(f"character {ch!r} not in vocabulary")
            out.append(self.index[ch])
        return out

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids if i not in (self.blank, self.sos))

    def characters(self) -> str:
        return "".join(t for t in self.tokens if t not in (BLANK, SOS))


# ---------------------------------------------------------------------------
# fusion placement


@dataclass(frozen=True)
class FusionPlan:
    cross_modal: tuple  # one flag per update-encoder block
    fe_slot: str = "second"

    @property
    def n_blocks(self) -> int:
        return len(self.cross_modal)

    @property
    def n_cc(self) -> int:
        return sum(self.cross_modal)

    @property
    def n_c(self) -> int:
        return self.n_blocks - self.n_cc

    @classmethod
    def from_preset(cls, name: str, n_blocks: int = 12, fe_slot: str = "second") -> "FusionPlan":
        """Presets: early/middle/late (a third of the blocks), earlyK/middleK/lateK, all, none."""
        flags = [False] * n_blocks
        key = name.strip().lower()
        m = re.fullmatch(r"(early|middle|late)(\d+)?", key)
        if key == "all":
            flags = [True] * n_blocks
        elif key in ("none", "audio"):
            pass
        elif m:
            count = int(m.group(2)) if m.group(2) else max(1, n_blocks // 3)
            if not 1 <= count <= n_blocks:
                raise ValueError(f"preset {name!r} needs {count} blocks, encoder has {n_blocks}")
            start = {"early": 0, "middle": (n_blocks - count) // 2, "late": n_blocks - count}[m.group(1)]
            flags[start:start + count] = [True] * count
        else:
            raise ValueError(f"unknown fusion preset {name!r}; valid: {', '.join(PRESETS)}")
        return cls(tuple(flags), fe_slot)


PRESETS = ("early", "middle", "late", "early4", "early8", "middle4", "late4", "early2", "middle2",
           "late2", "all", "none")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "punet"  # punet | asr | lip | concat
    characters: str = " abfmnoptv"
    n_bins: int = 65
    visual_dim: int = 16
    d_a: int = 64
    d_k: int = 64
    d_ff: int = 256
    heads: int = 4
    conv_kernel: int = 7
    dropout: float = 0.1
    n_blocks: int = 6
    n_pred_blocks: int = 2
    n_dec_blocks: int = 1
    dec_heads: int = 4
    dec_d_ff: int = 256
    max_len: int = 100
    K: int = 8
    fe_slot: str = "second"
    preset: str = "early"

    @property
    def conformer(self) -> ConformerConfig:
        return ConformerConfig(self.d_a, self.d_k, self.d_ff, self.heads, self.conv_kernel, self.dropout)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.from_characters(self.characters)

    @property
    def fe(self) -> FEConfig:
        if self.d_ff % self.K:
            raise ValueError(f"d_ff={self.d_ff} is not divisible by K={self.K}")
        return FEConfig(self.K, self.d_ff // self.K, self.vocab.size, self.fe_slot)

    @property
    def plan(self) -> FusionPlan:
        if self.kind != "punet":
            return FusionPlan.from_preset("none", self.n_blocks)
        return FusionPlan.from_preset(self.preset, self.n_blocks, self.fe_slot)

    def to_text(self) -> str:
        return to_key_values(self)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_key_values(text, cls))


def to_key_values(cfg) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, str) else f"{k} = {v}\n"
                   for k, v in asdict(cfg).items())


def parse_key_values(text: str, schema) -> dict:
    """Parse ``key = value`` lines, coercing values to the dataclass field types."""
    types = {f.name: f.type for f in fields(schema)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def _coerce(value: str, typ):
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
        value = value[1:-1]
        if t == "str":
            return value
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        return value.lower() in ("1", "true", "yes", "on")
    return value


# ---------------------------------------------------------------------------
# parameter registration


def init_predictor(store, cfg: ModelConfig, rng) -> None:
    init_linear(store, "pred.front", cfg.d_a, cfg.visual_dim, rng)
    for i in range(cfg.n_pred_blocks):
        init_conformer_block(store, f"pred.{i}", cfg.conformer, rng)
    init_linear(store, "pred.proj", cfg.vocab.size, cfg.d_a, rng)


def init_update_encoder(store, cfg: ModelConfig, plan: FusionPlan, rng) -> None:
    init_subsampler(store, "sub", cfg.n_bins, cfg.d_a, rng)
    fe = cfg.fe if plan.n_cc else None
    for i, cross in enumerate(plan.cross_modal):
        init_conformer_block(store, f"enc.{i}", cfg.conformer, rng, fe=fe if cross else None)


def init_decoder(store, cfg: ModelConfig, rng) -> None:
    d, C = cfg.d_a, cfg.vocab.size
    store.add("dec.embed.w", rng.normal(0.0, 1.0, size=(C, d)))
    for i in range(cfg.n_dec_blocks):
        q = f"dec.{i}"
        init_layer_norm(store, f"{q}.self.ln", d)
        init_mha(store, f"{q}.self", d, rng)
        init_layer_norm(store, f"{q}.src.ln", d)
        init_mha(store, f"{q}.src", d, rng)
        init_ffn(store, f"{q}.ffn", d, cfg.dec_d_ff, rng)
    init_layer_norm(store, "dec.ln_out", d)
    init_linear(store, "dec.out", C, d, rng)


def init_feat_concat(store, cfg: ModelConfig, rng) -> None:
    init_subsampler(store, "sub", cfg.n_bins, cfg.d_a, rng)
    init_linear(store, "vis.front", cfg.d_a, cfg.visual_dim, rng)
    init_layer_norm(store, "cat.ln_a", cfg.d_a)
    init_layer_norm(store, "cat.ln_v", cfg.d_a)
    init_linear(store, "cat.l1", cfg.d_a, 2 * cfg.d_a, rng)
    init_linear(store, "cat.l2", cfg.d_a, cfg.d_a, rng)
    for i in range(cfg.n_blocks):
        init_conformer_block(store, f"enc.{i}", cfg.conformer, rng)


# ---------------------------------------------------------------------------
# forward functions


def predict(visual: Tensor, params, cfg: ModelConfig, mask=None, rng=None):
    """Visual frames -> (posterior rows, projection logits, encoder hidden)."""
    if visual.shape[1] < 1:
        raise ValueError("predict: empty visual sequence")
    h = ad.linear(visual, params["pred.front.w"], params["pred.front.b"])
    for i in range(cfg.n_pred_blocks):
        h = conformer_block_forward(h, params.view(f"pred.{i}"), cfg.conformer, mask=mask, rng=rng)
    logits = ad.linear(h, params["pred.proj.w"], params["pred.proj.b"])
    return ad.softmax(logits, axis=-1), logits, h


def update(audio: Tensor, rho: Tensor | None, plan: FusionPlan, params, cfg: ModelConfig, mask=None,
           rng=None) -> Tensor:
    """Run the update encoder; cross-modal blocks all receive the same ``rho``."""
    if plan.n_cc and rho is None:
        raise ValueError("update: fusion plan has cross-modal blocks but no visual embedding")
    if rho is not None and rho.shape[:2] != audio.shape[:2]:
        raise ShapeError(f"update: audio frames {audio.shape[:2]} != visual embedding frames {rho.shape[:2]}")
    fe = cfg.fe if plan.n_cc else None
    x = audio
    for i, cross in enumerate(plan.cross_modal):
        x = conformer_block_forward(x, params.view(f"enc.{i}"), cfg.conformer, mask=mask,
                                    rho=rho if cross else None, fe=fe if cross else None, rng=rng)
    return x


def feat_concat_forward(audio: Tensor, visual: Tensor, params, cfg: ModelConfig, mask=None, rng=None) -> Tensor:
    """Normalise both streams, concatenate per frame, two linear layers, vanilla blocks."""
    if audio.shape[:2] != visual.shape[:2]:
        raise ShapeError(f"feat_concat: audio frames {audio.shape[:2]} != visual frames {visual.shape[:2]}")
    a = ln(audio, params.view("cat.ln_a"))
    v = ln(ad.linear(visual, params["vis.front.w"], params["vis.front.b"]), params.view("cat.ln_v"))
    x = ad.silu(ad.linear(ad.concat([a, v], axis=-1), params["cat.l1.w"], params["cat.l1.b"]))
    x = ad.linear(x, params["cat.l2.w"], params["cat.l2.b"])
    for i in range(cfg.n_blocks):
        x = conformer_block_forward(x, params.view(f"enc.{i}"), cfg.conformer, mask=mask, rng=rng)
    return x


def decoder_forward(R: Tensor, prefix, params, cfg: ModelConfig, mem_mask=None) -> Tensor:
    """Teacher-forced log-probs (B, L, C) for every position of ``prefix`` (B, L)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim == 1:
        prefix = prefix[None]
    B, L = prefix.shape
    if L > cfg.max_len:
        raise ValueError(f"decoder: prefix length {L} exceeds max_len {cfg.max_len}")
    d = cfg.d_a
    x = ad.take(params["dec.embed.w"], prefix) * np.sqrt(d)
    x = x + sinusoid_table(np.arange(L), d).astype(R.dtype)
    for i in range(cfg.n_dec_blocks):
        p = params.view(f"dec.{i}")
        x = x + mha_forward(ln(x, p.view("self.ln")), ln(x, p.view("self.ln")), p.view("self"),
                            cfg.dec_heads, causal=True)
        x = x + mha_forward(ln(x, p.view("src.ln")), R, p.view("src"), cfg.dec_heads, key_mask=mem_mask)
        x = x + ffn_forward(ln(x, p.view("ffn.ln")), p.view("ffn"))
    logits = ad.linear(ln(x, params.view("dec.ln_out")), params["dec.out.w"], params["dec.out.b"])
    return ad.log_softmax(logits, axis=-1)


def decode_step(R: Tensor, prefix, params, cfg: ModelConfig) -> np.ndarray:
    """Next-token log-probs given a single prefix that starts with [sos]."""
    prefix = list(prefix)
    if not prefix or prefix[0] != cfg.vocab.sos:
        raise ValueError("decode_step: prefix must begin with [sos]")
    if R.ndim == 2:
        R = R.reshape(1, *R.shape)
    with ad.no_grad():
        return decoder_forward(R, [prefix], params, cfg).data[0, -1]


class AVSRModel:
    """Parameter store plus the forward wiring for one architecture kind."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.vocab = cfg.vocab
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            if cfg.kind in ("lip", "punet"):
                init_predictor(params, cfg, rng)
            if cfg.kind in ("asr", "punet"):
                init_update_encoder(params, cfg, cfg.plan, rng)
            if cfg.kind == "concat":
                init_feat_concat(params, cfg, rng)
            if cfg.kind in ("asr", "punet", "concat"):
                init_linear(params, "ctc", cfg.vocab.size, cfg.d_a, rng)
            elif cfg.kind != "lip":
                raise ValueError(f"unknown model kind {cfg.kind!r}")
            init_decoder(params, cfg, rng)
        self.params = params

    @property
    def plan(self) -> FusionPlan:
        return self.cfg.plan

    def encode(self, batch, rng=None) -> dict:
        """Returns ``R`` (B, T', d), its frame ``mask`` and CTC ``log_probs``."""
        cfg, p = self.cfg, self.params
        out = {}
        if cfg.kind in ("lip", "punet"):
            vis = Tensor(batch.visual)
            rho, logits, hidden = predict(vis, p, cfg, mask=batch.visual_mask, rng=rng)
            out["rho"], out["pred_logits"] = rho, logits
            if cfg.kind == "lip":
                out.update(R=hidden, mask=batch.visual_mask, log_probs=ad.log_softmax(logits))
                return out
        audio, mask = subsample4x(Tensor(batch.audio), p.view("sub"), batch.audio_mask)
        if audio.shape[1] != batch.visual.shape[1] and cfg.kind in ("punet", "concat"):
            raise ShapeError(f"audio frames {audio.shape[1]} != visual frames {batch.visual.shape[1]}")
        if cfg.kind == "concat":
            R = feat_concat_forward(audio, Tensor(batch.visual), p, cfg, mask=mask, rng=rng)
        else:
            R = update(audio, out.get("rho"), self.plan, p, cfg, mask=mask, rng=rng)
        out.update(R=R, mask=mask, log_probs=ad.log_softmax(ad.linear(R, p["ctc.w"], p["ctc.b"])))
        return out

    def decoder_log_probs(self, R: Tensor, prefix, mem_mask=None) -> Tensor:
        return decoder_forward(R, prefix, self.params, self.cfg, mem_mask=mem_mask)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model_config": self.cfg.to_text()}
        meta.update(extra or {})
        self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> "AVSRModel":
        store, meta = ParamStore.load(path)
        cfg = ModelConfig.from_text(meta["model_config"])
        model = cls(cfg, params=store)
        model.meta = meta
        return model


def pretrained_source(name: str):
    """(which checkpoint, tensor name) feeding ``name``; None keeps the fresh init."""
    if name.rsplit(".", 1)[-1] in ("w_rho", "b_rho"):
        return None
    if name.startswith(("pred.", "dec.")):
        return "lip", name
    if name.startswith("vis.front."):
        return "lip", "pred.front." + name[len("vis.front."):]
    if name.startswith(("sub.", "enc.", "ctc.")):
        return "asr", name
    return None


def init_from_pretrained(model: AVSRModel, asr_params: ParamStore, lip_params: ParamStore) -> AVSRModel:
    """Predictor and decoder from the lipreading model; front end, update encoder
    and CTC head from the ASR model.  Factor weights keep their fresh init."""
    sources = {"asr": asr_params, "lip": lip_params}
    store = model.params
    for name in store.names():
        src = pretrained_source(name)
        if src is None:
            continue
        ckpt, src_name = sources[src[0]], src[1]
        if src_name not in ckpt:
            raise KeyError(f"{src[0]} checkpoint lacks tensor {src_name!r}")
        a = ckpt[src_name].data
        t = store[name]
        if a.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: model {t.data.shape}, checkpoint {a.shape}")
        t.data = np.array(a, dtype=t.data.dtype)
    store.version += 1
    return model


# ---------------------------------------------------------------------------
# character language model


@dataclass(frozen=True)
class LMConfig:
    characters: str = " abfmnoptv"
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    n_blocks: int = 2

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.from_characters(self.characters)

    def to_text(self) -> str:
        return to_key_values(self)

    @classmethod
    def from_text(cls, text: str) -> "LMConfig":
        return cls(**parse_key_values(text, cls))


class CharLM:
    """Causal character transformer without positional encoding."""

    def __init__(self, cfg: LMConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.vocab = cfg.vocab
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            params.add("lm.embed.w", rng.normal(0.0, 1.0, size=(self.vocab.size, cfg.d)))
            for i in range(cfg.n_blocks):
                init_layer_norm(params, f"lm.{i}.attn.ln", cfg.d)
                init_mha(params, f"lm.{i}.attn", cfg.d, rng)
                init_ffn(params, f"lm.{i}.ffn", cfg.d, cfg.d_ff, rng)
            init_layer_norm(params, "lm.ln_out", cfg.d)
            init_linear(params, "lm.out", self.vocab.size, cfg.d, rng)
        self.params = params

    def forward(self, prefix) -> Tensor:
        """Log-probs (B, L, C) of the next token at every prefix position; blank gets ~0 mass."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if (prefix == self.vocab.blank).any() or prefix.min() < 0 or prefix.max() >= self.vocab.size:
            raise KeyError("lm: prefix contains an unknown or [blank] token")
        p = self.params
        x = ad.take(p["lm.embed.w"], prefix)
        for i in range(self.cfg.n_blocks):
            h = ln(x, p.view(f"lm.{i}.attn.ln"))
            x = x + mha_forward(h, h, p.view(f"lm.{i}.attn"), self.cfg.heads, causal=True)
            x = x + ffn_forward(ln(x, p.view(f"lm.{i}.ffn.ln")), p.view(f"lm.{i}.ffn"))
        logits = ad.linear(ln(x, p.view("lm.ln_out")), p["lm.out.w"], p["lm.out.b"])
        keep = np.ones(self.vocab.size, dtype=bool)
        keep[self.vocab.blank] = False
        return ad.log_softmax(ad.where(keep, logits, -1e30), axis=-1)

    def score(self, prefix) -> np.ndarray:
        """Next-token log-probs for one prefix starting with [sos]; blank is -inf."""
        with ad.no_grad():
            out = self.forward([list(prefix)]).data[0, -1].copy()
        out[self.vocab.blank] = -np.inf
        return out

    def save(self, path) -> None:
        self.params.save(path, {"lm_config": self.cfg.to_text()})

    @classmethod
    def load(cls, path) -> "CharLM":
        store, meta = ParamStore.load(path)
        return cls(LMConfig.from_text(meta["lm_config"]), params=store)


def with_kind(cfg: ModelConfig, kind: str, **kw) -> ModelConfig:
    return replace(cfg, kind=kind, **kw)
