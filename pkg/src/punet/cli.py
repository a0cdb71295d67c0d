"""Command-line entry points: gen-data, pretrain, train, eval, ablate, analyze."""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .corpus import SynthConfig, load_corpus, save_corpus, synth_corpus
from .decoding import DecodeConfig, write_records
from .features import parse_snr
from .metrics import DEFAULT_SNR_GRID, cosine_profile, render_report
from .model import PRESETS, AVSRModel, CharLM, LMConfig, ModelConfig, parse_key_values
from .train import (NoiseBank, RunManifest, TrainConfig, check_vocab, corpus_id, evaluate, finetune_init,
                    representations, train_lm, train_model)

ERROR_PREFIX = "punet-error:"
SECTIONS = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig,
            "lm": LMConfig}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration files: ``[section]`` headers followed by ``key = value`` lines


def read_config(path) -> dict:
    """Parse a sectioned config into {section: {field: value}}."""
    if path is None:
        return {name: {} for name in SECTIONS}
    text = Path(path).read_text()
    chunks = {name: [] for name in SECTIONS}
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.strip().startswith("#") else ""
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise UsageError(f"{path}:{n}: unknown section [{current}]; valid: {', '.join(SECTIONS)}")
            continue
        if current is None:
            raise UsageError(f"{path}:{n}: key outside any [section]")
        chunks[current].append(line)
    out = {}
    for name, lines in chunks.items():
        try:
            out[name] = parse_key_values("\n".join(lines), SECTIONS[name])
        except (KeyError, ValueError) as e:
            raise UsageError(f"{path} [{name}]: {e}") from None
    return out


def build(section: str, conf: dict, **overrides):
    cls = SECTIONS[section]
    kw = dict(conf.get(section, {}))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if section == "data":
        return SynthConfig.from_json({**asdict(SynthConfig()), **kw})
    return cls(**kw)


# ---------------------------------------------------------------------------
# output directory handling


@contextmanager
def output_dir(path, force: bool, allow_existing: bool = True):
    """Create ``path`` and hold an exclusive lock file for the duration of the command."""
    out = Path(path)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()) and not allow_existing:
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out} is locked by another run ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _log_writer(path):
    f = open(path, "w")
    f.write("step\tepoch\ttotal\tctc\tatt\tlr\n")

    def log(step, epoch, vals, lr):
        f.write(f"{step}\t{epoch}\t{vals['total']!r}\t{vals.get('ctc', '')!r}\t{vals.get('att', '')!r}\t{lr!r}\n")
        f.flush()
    return f, log


def _noise_for(corpus, split: str, seed: int, talkers: int = 6) -> NoiseBank:
    waves = [u.wave for u in corpus.split(split)]
    return NoiseBank(waves, np.random.default_rng([seed, 101 if split == "train" else 103]), talkers)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(out, config=None, seed: int = 0, force: bool = False) -> Path:
    conf = read_config(config)
    cfg = build("data", conf, seed=seed)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(f"invalid data config: {e}") from None
    with output_dir(out, force, allow_existing=False) as d:
        man = RunManifest("gen-data", seed, {"data": cfg.to_json()})
        corpus = synth_corpus(cfg, seed)
        path = save_corpus(corpus, d)
        man.data["corpus_id"] = corpus_id(corpus)
        man.data["metrics"] = {s: len(corpus.split(s)) for s in ("train", "dev", "test")}
        man.write(d / "run_manifest.json")
    return path


def cmd_pretrain(mode: str, corpus_dir, out, config=None, seed: int = 0, force: bool = False) -> Path:
    if mode not in ("lip", "asr", "lm"):
        raise UsageError(f"unknown pretrain mode {mode!r}; valid: lip, asr, lm")
    conf = read_config(config)
    corpus = load_corpus(corpus_dir)
    with output_dir(out, force) as d:
        if mode == "lm":
            lcfg = build("lm", conf, characters=corpus.characters)
            tcfg = build("train", conf)
            man = RunManifest("pretrain-lm", seed, {"lm": asdict(lcfg), "train": asdict(tcfg)}, corpus_id(corpus))
            lm = CharLM(lcfg, seed=seed)
            f, log = _log_writer(d / "train_log.tsv")
            with f:
                hist = train_lm(lm, [u.text for u in corpus.split("train")], tcfg, seed, log)
            ckpt = d / "lm.ckpt"
            lm.save(ckpt)
        else:
            mcfg = build("model", conf, kind=mode)
            tcfg = build("train", conf)
            if mode == "lip":
                tcfg = replace(tcfg, noisy=False, spec_augment=False)
            check = AVSRModel(mcfg, seed=seed)
            try:
                check_vocab(corpus, check.vocab)
            except ValueError as e:
                raise UsageError(str(e)) from None
            man = RunManifest(f"pretrain-{mode}", seed, {"model": asdict(mcfg), "train": asdict(tcfg)},
                              corpus_id(corpus))
            f, log = _log_writer(d / "train_log.tsv")
            with f:
                hist = train_model(check, corpus.split("train"), check.vocab, corpus.cfg.sample_rate, tcfg, seed,
                                   _noise_for(corpus, "train", seed), log)
            ckpt = d / f"{mode}.ckpt"
            check.save(ckpt, {"seed": seed})
            _, summ = evaluate(check, corpus.split("dev"), corpus.cfg.sample_rate, greedy=True)
            man.data["metrics"] = {"dev_greedy_ctc": summ.as_dict()}
        man.data["checkpoints"] = {mode: str(ckpt)}
        man.data["first_losses"] = hist["total"][:10]
        man.write(d / "run_manifest.json")
    return ckpt


def _train_avsr(corpus, mcfg: ModelConfig, tcfg: TrainConfig, seed: int, asr_ckpt, lip_ckpt, d: Path,
                tag: str = "avsr"):
    model = AVSRModel(mcfg, seed=seed)
    check_vocab(corpus, model.vocab)
    asr = AVSRModel.load(asr_ckpt) if asr_ckpt else None
    lip = AVSRModel.load(lip_ckpt) if lip_ckpt else None
    try:
        finetune_init(model, asr, lip)
    except (KeyError, ValueError) as e:
        raise UsageError(f"cannot initialise from checkpoints: {e}") from None
    f, log = _log_writer(d / f"{tag}_train_log.tsv")
    with f:
        hist = train_model(model, corpus.split("train"), model.vocab, corpus.cfg.sample_rate, tcfg, seed,
                           _noise_for(corpus, "train", seed, tcfg.babble_talkers), log)
    ckpt = d / f"{tag}.ckpt"
    model.save(ckpt, {"seed": seed})
    return model, hist, ckpt


def cmd_train(corpus_dir, out, preset: str = "early", kind: str = "punet", asr_ckpt=None, lip_ckpt=None,
              no_pretrain: bool = False, config=None, seed: int = 0, force: bool = False) -> Path:
    if preset not in PRESETS:
        try:
            from .model import FusionPlan
            FusionPlan.from_preset(preset, 6)
        except ValueError:
            raise UsageError(f"unknown preset {preset!r}; valid: {', '.join(PRESETS)}") from None
    if not no_pretrain and not (asr_ckpt and lip_ckpt):
        raise UsageError("train needs --asr and --lip checkpoints (or --no-pretrain)")
    conf = read_config(config)
    corpus = load_corpus(corpus_dir)
    mcfg = build("model", conf, kind=kind, preset=preset)
    tcfg = build("train", conf)
    with output_dir(out, force) as d:
        man = RunManifest("train", seed, {"model": asdict(mcfg), "train": asdict(tcfg),
                                          "init": None if no_pretrain else [str(asr_ckpt), str(lip_ckpt)]},
                          corpus_id(corpus))
        model, hist, ckpt = _train_avsr(corpus, mcfg, tcfg, seed, None if no_pretrain else asr_ckpt,
                                        None if no_pretrain else lip_ckpt, d)
        man.data["checkpoints"] = {"avsr": str(ckpt)}
        man.data["first_losses"] = hist["total"][:10]
        man.write(d / "run_manifest.json")
    return ckpt


def cmd_eval(ckpt, corpus_dir, out, split: str = "test", snr="clean", lm_ckpt=None, report: str = "table",
             config=None, seed: int = 0, force: bool = False, beam=None, gamma=None, psi=None) -> dict:
    conf = read_config(config)
    dcfg = build("decode", conf, beam=beam, gamma=gamma, psi=psi)
    if dcfg.psi > 0 and lm_ckpt is None:
        raise UsageError(f"psi={dcfg.psi} needs a language model checkpoint (--lm), or set psi = 0")
    snr = parse_snr(snr)
    corpus = load_corpus(corpus_dir)
    model = AVSRModel.load(ckpt)
    lm = CharLM.load(lm_ckpt) if lm_ckpt else None
    with output_dir(out, force) as d:
        man = RunManifest("eval", seed, {"decode": asdict(dcfg), "ckpt": str(ckpt), "split": split, "snr": snr,
                                         "lm": str(lm_ckpt) if lm_ckpt else None}, corpus_id(corpus))
        noise = _noise_for(corpus, split, seed) if snr is not None else None
        records, summ = evaluate(model, corpus.split(split), corpus.cfg.sample_rate, snr, noise, dcfg, lm, seed)
        write_records(d / "records.tsv", records)
        summary = summ.as_dict()
        header = ["split", "snr", "utterances", "wer", "cer"]
        (d / "report.txt").write_text(render_report(header, [[split, snr, summ.n_utts, summ.wer, summ.cer]],
                                                    report))
        man.data["metrics"] = summary
        man.write(d / "run_manifest.json")
    return summary


def cmd_ablate(corpus_dir, out, asr_ckpt, lip_ckpt, presets=("early", "middle", "late"), fe_slots=("second",),
               Ks=(8,), snr="0", lm_ckpt=None, report: str = "table", config=None, seed: int = 0,
               force: bool = False) -> list:
    sweep = [(p, s, k) for p in presets for s in fe_slots for k in Ks]
    if not sweep:
        raise UsageError("empty ablation sweep")
    conf = read_config(config)
    corpus = load_corpus(corpus_dir)
    tcfg = build("train", conf)
    dcfg = build("decode", conf)
    if dcfg.psi > 0 and lm_ckpt is None:
        raise UsageError(f"psi={dcfg.psi} needs a language model checkpoint (--lm), or set psi = 0")
    lm = CharLM.load(lm_ckpt) if lm_ckpt else None
    snr_v = parse_snr(snr)
    rows = []
    with output_dir(out, force) as d:
        man = RunManifest("ablate", seed, {"sweep": sweep, "train": asdict(tcfg), "decode": asdict(dcfg),
                                           "snr": snr_v}, corpus_id(corpus))
        noise = _noise_for(corpus, "test", seed)
        for preset, slot, K in sweep:
            tag = f"{preset}-{slot}-K{K}"
            mcfg = build("model", conf, kind="punet", preset=preset, fe_slot=slot, K=K)
            model, _, ckpt = _train_avsr(corpus, mcfg, tcfg, seed, asr_ckpt, lip_ckpt, d, tag)
            _, clean = evaluate(model, corpus.split("test"), corpus.cfg.sample_rate, None, None, dcfg, lm, seed)
            _, noisy = evaluate(model, corpus.split("test"), corpus.cfg.sample_rate, snr_v, noise, dcfg, lm, seed)
            rows.append([preset, slot, K, clean.cer, noisy.cer])
            man.data["checkpoints"][tag] = str(ckpt)
        header = ["preset", "fe_slot", "K", "cer_clean", f"cer_{snr}dB"]
        (d / "report.txt").write_text(render_report(header, rows, report))
        man.data["metrics"] = {"rows": rows}
        man.write(d / "run_manifest.json")
    return rows


def cmd_analyze(ckpts, corpus_dir, out, snrs=DEFAULT_SNR_GRID, split: str = "test", n_utts: int = 200,
                report: str = "table", config=None, seed: int = 0, force: bool = False) -> dict:
    corpus = load_corpus(corpus_dir)
    utts = corpus.split(split)[:n_utts]
    snrs = [None] + [s for s in snrs if s is not None]  # clean reference column, 1.0 by construction
    noise = _noise_for(corpus, split, seed)
    profiles = {}
    with output_dir(out, force) as d:
        man = RunManifest("analyze", seed, {"ckpts": [str(c) for c in ckpts], "snrs": list(snrs), "split": split},
                          corpus_id(corpus))
        for c in ckpts:
            model = AVSRModel.load(c)
            prof = cosine_profile(representations(model, corpus.cfg.sample_rate),
                                  [(u.wave, u.visual) for u in utts], snrs, noise.wave, seed=seed)
            profiles[str(c)] = prof
        header = ["model"] + list(next(iter(profiles.values())).snrs)
        rows = [[Path(k).stem if Path(k).stem not in ("avsr",) else str(Path(k).parent.name)] + p.mean_theta
                for k, p in profiles.items()]
        (d / "report.txt").write_text(render_report(header, rows, report))
        man.data["metrics"] = {k: dict(zip(map(str, p.snrs), p.mean_theta)) for k, p in profiles.items()}
        man.write(d / "run_manifest.json")
    return profiles


# ---------------------------------------------------------------------------
# argument parsing


def _csv(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="punet", description="Audio-visual speech recognition on a synthetic corpus.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="sectioned key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus")

    s = sub.add_parser("pretrain", help="pretrain a lipreading, audio-only or language model")
    s.add_argument("--mode", required=True, choices=["lip", "asr", "lm"])
    s.add_argument("--corpus", required=True)

    s = sub.add_parser("train", help="fine-tune an audio-visual model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--preset", default="early")
    s.add_argument("--kind", default="punet", choices=["punet", "asr", "concat"])
    s.add_argument("--asr")
    s.add_argument("--lip")
    s.add_argument("--no-pretrain", action="store_true")

    s = sub.add_parser("eval", help="decode a split and score it")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--snr", default="clean")
    s.add_argument("--lm")
    s.add_argument("--beam", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--psi", type=float)
    s.add_argument("--report", default="table", choices=["table", "records"])

    s = sub.add_parser("ablate", help="train and score a sweep of fusion configurations")
    s.add_argument("--corpus", required=True)
    s.add_argument("--asr", required=True)
    s.add_argument("--lip", required=True)
    s.add_argument("--presets", type=_csv, default=["early", "middle", "late"])
    s.add_argument("--fe-slots", type=_csv, default=["second"])
    s.add_argument("--K", type=lambda t: [int(v) for v in _csv(t)], default=[8])
    s.add_argument("--snr", default="0")
    s.add_argument("--lm")
    s.add_argument("--report", default="table", choices=["table", "records"])

    s = sub.add_parser("analyze", help="cosine-similarity robustness profile")
    s.add_argument("--ckpts", type=_csv, required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--snrs", type=lambda t: [float(v) for v in _csv(t)], default=list(DEFAULT_SNR_GRID))
    s.add_argument("--split", default="test")
    s.add_argument("--n-utts", type=int, default=200)
    s.add_argument("--report", default="table", choices=["table", "records"])
    return p


def dispatch(args) -> object:
    common = {"config": args.config, "seed": args.seed, "force": args.force}
    if args.command == "gen-data":
        return cmd_gen_data(args.out, **common)
    if args.command == "pretrain":
        return cmd_pretrain(args.mode, args.corpus, args.out, **common)
    if args.command == "train":
        return cmd_train(args.corpus, args.out, args.preset, args.kind, args.asr, args.lip, args.no_pretrain,
                         **common)
    if args.command == "eval":
        return cmd_eval(args.ckpt, args.corpus, args.out, args.split, args.snr, args.lm, args.report,
                        beam=args.beam, gamma=args.gamma, psi=args.psi, **common)
    if args.command == "ablate":
        return cmd_ablate(args.corpus, args.out, args.asr, args.lip, args.presets, args.fe_slots, args.K,
                          args.snr, args.lm, args.report, **common)
    if args.command == "analyze":
        return cmd_analyze(args.ckpts, args.corpus, args.out, args.snrs, args.split, args.n_utts, args.report,
                           **common)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = dispatch(args)
    except (UsageError, ValueError, KeyError, FileNotFoundError, OSError) as e:
        msg = " ".join(str(e).split())
        print(f"{ERROR_PREFIX} {type(e).__name__}: {msg}", file=sys.stderr)
        return 2
    if isinstance(result, dict):
        for k, v in result.items():
            if not hasattr(v, "mean_theta"):
                print(f"{k}={v}")
            else:
                print(f"{k} " + " ".join(f"{s}:{t:.4f}" for s, t in zip(v.snrs, v.mean_theta)))
    elif result is not None:
        print(result)
    return 0
