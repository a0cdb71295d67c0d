"""Acceptance suite: one PASS/FAIL line per criterion, listed in the terminal summary.

Criteria 5 to 7 share one cached training study (three seeds); see harness.py.
"""

import copy
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from punet import autodiff as ad
from punet.autodiff import Tensor
from punet.blocks import (ConformerConfig, FEConfig, conformer_block_forward, conv_block_forward,
                          cross_modal_block_forward, ffn_forward, fe_ffn_forward, init_conformer_block,
                          init_conv_block, init_ffn, mhsa_forward)
from punet.cli import main
from punet.decoding import (DecodeConfig, greedy_attention_decode, joint_beam_search, lm_fn_for,
                            model_decoder_fn)
from punet.losses import attention_ce_loss, ctc_forward_loss, ctc_loss
from punet.metrics import edit_distance, wer
from punet.model import AVSRModel, FusionPlan, ModelConfig, init_from_pretrained, init_update_encoder, with_kind
from punet.params import ParamStore, finite_difference_check
from punet.train import make_batch

from conftest import ACCEPTANCE_LINES, projection_loss
from harness import PROFILED, StudyConfig, run_study
from test_blocks import fe_store, mhsa_params, perturb

ROOT_SEEDS = range(20)


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient integrity


SMALL = ConformerConfig(d_a=8, d_k=8, d_ff=12, heads=2, conv_kernel=3)


def _input(store, rng, shape, name="x"):
    store.add(name, rng.normal(size=shape))
    return store[name]


def _ffn(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_ffn(store, "f", 6, 10, rng)
    perturb(store, rng)
    x = _input(store, rng, (2, 4, 6))
    return store, lambda: projection_loss(ffn_forward(x, store.view("f")), seed)


def _fe_ffn(seed):
    rng = np.random.default_rng(seed)
    store = fe_store(rng)
    x = _input(store, rng, (2, 4, 6))
    r = _input(store, rng, (2, 4, 5), "r")
    return store, lambda: projection_loss(fe_ffn_forward(x, ad.softmax(r), store.view("f"), 3), seed)


def _mhsa(seed):
    rng = np.random.default_rng(seed)
    store, p = mhsa_params(rng)
    x = _input(store, rng, (2, 5, 8))
    mask = np.arange(5)[None, :] < np.array([[5], [3]])
    return store, lambda: projection_loss(mhsa_forward(x, p, 2, mask=mask), seed)


def _conv(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_conv_block(store, "c", SMALL, rng)
    perturb(store, rng)
    x = _input(store, rng, (2, 5, 8))
    return store, lambda: projection_loss(conv_block_forward(x, store.view("c")), seed)


def _block(seed, fe=None):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_conformer_block(store, "blk", SMALL, rng, fe)
    perturb(store, rng)
    x = _input(store, rng, (2, 5, 8))
    if fe is None:
        return store, lambda: projection_loss(conformer_block_forward(x, store.view("blk"), SMALL), seed)
    r = _input(store, rng, (2, 5, fe.C), "r")
    return store, lambda: projection_loss(
        cross_modal_block_forward(x, ad.softmax(r), store.view("blk"), SMALL, fe), seed)


def _ctc(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    z = store.add("z", rng.normal(size=(2, 6, 4)))
    targets = [[1, 2, 1], [3, 3]]
    return store, lambda: ctc_loss(ad.log_softmax(z), targets, lengths=[6, 5]).sum()


def _ce(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    z = store.add("z", rng.normal(size=(2, 4, 5)))
    y = [[1, 2, 3, 4], [0, 1, 1, 2]]
    return store, lambda: attention_ce_loss(ad.log_softmax(z), y, smoothing=0.1)


GRAD_CASES = {"ffn": _ffn, "fe_ffn+rho": _fe_ffn, "mhsa": _mhsa, "conv": _conv, "conformer": _block,
              "cross_modal+rho": lambda s: _block(s, FEConfig(K=3, d_l=4, C=5, slot="both")), "ctc": _ctc,
              "decoder_ce": _ce}


def test_criterion_1_gradient_integrity():
    t0 = time.process_time()
    worst = {}
    for name, build in GRAD_CASES.items():
        errs = []
        for seed in ROOT_SEEDS:
            store, f = build(seed)
            errs.append(finite_difference_check(f, store, h=1e-5, n_coords=24, rng=np.random.default_rng(seed),
                                                floor=1e-5))
        worst[name] = max(errs)
    cpu = time.process_time() - t0
    ok = max(worst.values()) < 1e-4 and cpu < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"max rel err < 1e-4 over 20 instances each ({detail}); {cpu:.0f}s CPU")


# ---------------------------------------------------------------------------
# 2. CTC oracle


def paths_oracle(lp, target):
    """-log sum over every frame path whose collapse equals the target."""
    T, C = lp.shape
    total = -np.inf
    for path in itertools.product(range(C), repeat=T):
        out, prev = [], None
        for c in path:
            if c != prev and c != 0:
                out.append(c)
            prev = c
        if out == list(target):
            total = np.logaddexp(total, lp[np.arange(T), path].sum())
    return -total


def test_criterion_2_ctc_oracle():
    rng = np.random.default_rng(2024)
    worst, inf_agree = 0.0, True
    for _ in range(200):
        T, C = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        while C ** T > 70_000:
            T -= 1
        lp = ad.log_softmax(Tensor(rng.normal(size=(T, C)) * 2)).data
        target = [int(c) for c in rng.integers(1, C, size=int(rng.integers(0, 4)))]
        ref = paths_oracle(lp, target)
        got = float(ctc_forward_loss(Tensor(lp), target).data)
        if np.isinf(ref):
            inf_agree &= bool(np.isinf(got))
        else:
            worst = max(worst, abs(got - ref))
    u = np.log(np.full((2, 3), 1 / 3))
    ln3 = float(ctc_forward_loss(Tensor(u), [1]).data)
    ln9 = float(ctc_forward_loss(Tensor(u), [1, 2]).data)
    inf = float(ctc_forward_loss(Tensor(u), [1, 1]).data)
    examples = abs(ln3 - np.log(3)) < 1e-12 and abs(ln9 - np.log(9)) < 1e-12 and inf == np.inf
    report(2, worst < 1e-9 and inf_agree and examples,
           f"200 instances max |DP - brute| {worst:.1e}; ln3/ln9/inf examples {'ok' if examples else 'wrong'}")


# ---------------------------------------------------------------------------
# 3 and 4. degenerate equivalence and parameter parity

TINY = ModelConfig(n_bins=9, visual_dim=4, d_a=8, d_k=8, d_ff=16, heads=2, conv_kernel=3, dropout=0.0,
                   n_blocks=3, n_pred_blocks=1, dec_heads=2, dec_d_ff=12, K=4, preset="all", max_len=20)


def _unit(store):
    for n in store.names():
        if n.endswith("w_rho"):
            store[n].data[:] = 0.0
        elif n.endswith("b_rho"):
            store[n].data[:] = 1.0


def _batch(rng, cfg=TINY, T=(6, 4)):
    from punet.train import Batch
    B, Tv = len(T), max(T)
    vmask = np.arange(Tv)[None, :] < np.array(T)[:, None]
    amask = np.repeat(vmask, 4, axis=1)
    return Batch([f"u{i}" for i in range(B)], ["ab"] * B, [[3, 4]] * B,
                 rng.normal(size=(B, 4 * Tv, cfg.n_bins)) * amask[..., None], amask,
                 rng.normal(size=(B, Tv, cfg.visual_dim)) * vmask[..., None], vmask, [None] * B)


def test_criterion_3_degenerate_equivalence():
    rng = np.random.default_rng(3)
    block_worst = 0.0
    for slot in ("first", "second", "both"):
        fe = FEConfig(K=3, d_l=4, C=5, slot=slot)
        store = ParamStore()
        init_conformer_block(store, "blk", SMALL, rng, fe)
        perturb(store, rng)
        _unit(store)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        rho = ad.softmax(Tensor(rng.normal(size=(2, 5, 5))))
        a = cross_modal_block_forward(x, rho, store.view("blk"), SMALL, fe).data
        b = conformer_block_forward(x, store.view("blk"), SMALL).data
        block_worst = max(block_worst, float(np.abs(a - b).max()))
    asr = AVSRModel(with_kind(TINY, "asr"), seed=5)
    lip = AVSRModel(with_kind(TINY, "lip"), seed=6)
    punet = init_from_pretrained(AVSRModel(TINY, seed=0), asr.params, lip.params)
    _unit(punet.params)
    b = _batch(rng)
    enc_diff = float(np.abs(punet.encode(b)["R"].data - asr.encode(b)["R"].data)[b.visual_mask].max())
    report(3, block_worst < 1e-12 and enc_diff < 1e-10,
           f"unit factors: block max diff {block_worst:.1e} (< 1e-12); pretrained encoder diff {enc_diff:.1e} "
           f"(< 1e-10)")


def test_criterion_4_parameter_parity():
    diffs = []
    for preset in ("early", "middle", "late", "all"):
        for slot, per in (("second", 1), ("first", 1), ("both", 2)):
            cfg = replace(TINY, n_blocks=6, preset=preset, fe_slot=slot)
            a, b = ParamStore(), ParamStore()
            init_update_encoder(a, cfg, cfg.plan, np.random.default_rng(0))
            init_update_encoder(b, cfg, FusionPlan.from_preset("none", 6), np.random.default_rng(0))
            K, C = cfg.K, cfg.vocab.size
            diffs.append(a.num_params() - b.num_params() == cfg.plan.n_cc * per * (K * C + K))
    rejected = 0
    for bad in (lambda: AVSRModel(replace(TINY, K=5), seed=0), lambda: init_conformer_block(ParamStore(), "b", SMALL, np.random.default_rng(0),
                                                             FEConfig(K=5, d_l=4, C=5))):
        try:
            bad()
        except ValueError:
            rejected += 1
    report(4, all(diffs) and rejected == 2,
           f"{sum(diffs)}/{len(diffs)} configurations differ by exactly K*C+K per slot; "
           f"d_l*K != d_ff rejected {rejected}/2")


# ---------------------------------------------------------------------------
# 5 to 7. fusion study (three seeds, shared by the tests below)

STUDY_BUDGET_S = 45 * 60


@pytest.fixture(scope="session")
def study():
    return run_study(StudyConfig(), log=print)


def test_pretraining_examples(study):
    asr, lip = study.pretrain_dev_cer["asr"], study.pretrain_dev_cer["lip"]
    assert asr < 0.05, f"ASR dev CER {asr:.4f}"
    assert lip < 1.0, f"lipreading dev CER {lip:.4f} not below the all-blank baseline"


def test_criterion_5_fusion_placement(study):
    cer0 = {v: study.mean_cer(v, 0.0) for v in ("early", "middle", "late")}
    clean = {v: study.mean_cer(v, None) for v in ("early", "middle", "late", "concat")}
    ordered = cer0["early"] <= cer0["middle"] <= cer0["late"]
    margin = cer0["late"] - cer0["early"]
    ok = ordered and margin >= 0.02 and max(clean.values()) < 0.05 and study.cpu_s <= STUDY_BUDGET_S
    report(5, ok, "0 dB CER early/middle/late " + "/".join(f"{cer0[v]:.2%}" for v in cer0)
           + f" (margin {margin * 100:.2f} points, need >= 2); worst clean AVSR CER {max(clean.values()):.2%} "
           f"(< 5%); study {study.cpu_s / 60:.1f} CPU min (<= 45)")


def test_criterion_6_visual_benefit(study):
    cer0 = {v: study.mean_cer(v, 0.0) for v in ("early", "audio", "concat")}
    ok = cer0["early"] < cer0["audio"] and cer0["early"] < cer0["concat"]
    report(6, ok, "0 dB CER P&U(early) {early:.2%}, audio-only {audio:.2%}, feat-concat {concat:.2%}".format(**cer0))


def test_criterion_7_cosine_robustness(study):
    snrs = list(study.theta[PROFILED[0], study.cfg.seeds[0]].snrs)
    means = {v: study.mean_theta(v) for v in PROFILED}
    noisy = [i for i, s in enumerate(snrs) if s is not None]
    mono = {v: all(means[v][i] > means[v][j] for i, j in zip(noisy, noisy[1:])) for v in PROFILED}
    at0 = {v: means[v][snrs.index(0.0)] for v in PROFILED}
    ok = all(mono.values()) and at0["early"] >= at0["concat"]
    report(7, ok, f"theta decreasing over {[s for s in snrs if s is not None]}: P&U {mono['early']}, "
           f"feat-concat {mono['concat']}; theta at 0 dB P&U {at0['early']:.4f} vs feat-concat {at0['concat']:.4f}")


# ---------------------------------------------------------------------------
# 8. decoding contracts

def encoded_test_set(study, n=100):
    """Trained early model and LM promoted to float64, so search scores compare at 1e-9."""
    model = copy.deepcopy(study.models["early", study.cfg.seeds[0]])
    model.params.astype(np.float64)
    lm = copy.deepcopy(study.lm)
    lm.params.astype(np.float64)
    utts = study.corpus.split("test")[:n]
    batch = make_batch(utts, model.vocab, study.corpus.cfg.sample_rate, dtype=np.float64)
    with ad.no_grad():
        enc = model.encode(batch)
    return model, lm, enc


def exhaustive_ctc(x, labels):
    best = (-np.inf, None)
    for L in range(x.shape[0] + 1):
        for seq in itertools.product(labels, repeat=L):
            v = -float(ctc_forward_loss(Tensor(x), list(seq)).data)
            if v > best[0] + 1e-12:
                best = (v, list(seq))
    return best


def test_criterion_8_decoding_contracts(study):
    model, lm, enc = encoded_test_set(study)
    lengths = enc["mask"].sum(axis=1)
    sos = model.vocab.sos
    greedy_ok = 0
    for b in range(100):
        T = int(lengths[b])
        R = enc["R"].data[b:b + 1, :T]
        fn = model_decoder_fn(model, R)
        res = joint_beam_search(enc["log_probs"].data[b, :T], fn, None, DecodeConfig(beam=1, gamma=1.0, psi=0.0),
                                sos)
        ref = greedy_attention_decode(fn, sos, maxlen=T)
        greedy_ok += res.tokens == ref.tokens and abs(res.score - ref.score) < 1e-9
    mono_ok = 0
    for b in range(20):
        T = int(lengths[b])
        R = enc["R"].data[b:b + 1, :T]
        x = enc["log_probs"].data[b, :T]
        scores = [joint_beam_search(x, model_decoder_fn(model, R), lm_fn_for(lm), DecodeConfig(beam=w), sos).score
                  for w in (1, 4, 8, 20)]
        mono_ok += all(y >= x - 1e-9 for x, y in zip(scores, scores[1:]))
    rng = np.random.default_rng(88)
    exh_ok = 0
    for _ in range(30):
        T, C = int(rng.integers(1, 7)), int(rng.integers(3, 5))
        x = ad.log_softmax(Tensor(rng.normal(size=(T, C)) * 2)).data
        score, seq = exhaustive_ctc(x, list(range(2, C)))
        res = joint_beam_search(x, None, None, DecodeConfig(beam=20, gamma=0.0, psi=0.0), sos=1)
        exh_ok += res.tokens == seq and abs(res.score - score) < 1e-9
    report(8, greedy_ok == 100 and mono_ok == 20 and exh_ok == 30,
           f"beam-1 = greedy attention {greedy_ok}/100; score non-decreasing over beams 1,4,8,20 {mono_ok}/20; "
           f"CTC-only = exhaustive {exh_ok}/30")


# ---------------------------------------------------------------------------
# 9. metrics


def quadratic_dp(a, b):
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def test_criterion_9_metrics():
    example = wer("THAT'S A PICKLE WALNUT", "THAT'S A PICKLED WALNUT")
    rng = np.random.default_rng(9)
    agree = 0
    for _ in range(500):
        a = list(rng.integers(0, 5, size=int(rng.integers(0, 12))))
        b = list(rng.integers(0, 5, size=int(rng.integers(0, 12))))
        agree += edit_distance(a, b).distance == quadratic_dp(a, b)
    report(9, example == 0.25 and agree == 500, f"worked example WER {example:.2%}; DP agreement {agree}/500")


# ---------------------------------------------------------------------------
# 10. reproducibility

REPRO_CONFIG = """
[data]
n_train = 40
n_dev = 4
n_test = 6
[model]
d_a = 16
d_k = 16
d_ff = 32
heads = 2
conv_kernel = 3
n_blocks = 2
n_pred_blocks = 1
dec_heads = 2
dec_d_ff = 24
K = 4
preset = early1
[train]
epochs = 1
batch_size = 4
warmup = 5
max_steps = 10
babble_talkers = 2
[decode]
beam = 4
psi = 0.0
"""


def test_criterion_10_reproducibility(tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text(REPRO_CONFIG)
    run = lambda *a: main(["--config", str(cfg), "--seed", "3"] + [str(x) for x in a])  # noqa: E731
    assert run("--out", tmp_path / "data", "gen-data") == 0
    manifests, records = [], []
    for tag in ("a", "b"):
        assert run("--out", tmp_path / f"train_{tag}", "train", "--corpus", tmp_path / "data", "--no-pretrain") == 0
        assert run("--out", tmp_path / f"eval_{tag}", "eval", "--ckpt", tmp_path / f"train_{tag}/avsr.ckpt",
                   "--corpus", tmp_path / "data", "--snr", "0") == 0
        manifests.append(json.loads((tmp_path / f"train_{tag}/run_manifest.json").read_text()))
        records.append((tmp_path / f"eval_{tag}/records.tsv").read_text())
    a, b = manifests
    same_inputs = {k: a[k] for k in ("command", "seed", "config", "corpus_id")} == \
        {k: b[k] for k in ("command", "seed", "config", "corpus_id")}
    losses = len(a["first_losses"]) == 10 and a["first_losses"] == b["first_losses"]
    report(10, same_inputs and losses and records[0] == records[1],
           f"identical manifest inputs: first-10 losses bit-identical {losses}, decode records identical "
           f"{records[0] == records[1]}")
