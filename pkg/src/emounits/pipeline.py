"""Staged pipeline: corpus generation, training, conversion, synthesis, evaluation, benchmarks.

Every artifact carries the hash of the config that produced it.  Outputs are
written to a temporary sibling first and moved into place, so a failed stage
leaves nothing half-written behind.
"""
from __future__ import annotations

import contextlib
import json
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dsp, nn
from .config import PipelineConfig
from .corpus import (Utterance, generate_corpus, load_manifest, make_parallel_pairs, split_groups,
                     write_manifest)
from .metrics import EvalReport, PipelineModels, evaluate_pipeline
from .prosody import bins as binning
from .prosody.duration import (CNNDurationModel, DurationCNN, NgramDurationModel, duration_metrics,
                               train_duration_cnn, train_duration_ngram)
from .prosody.f0 import F0Model, F0Net, encode_example, train_f0
from .translator import (Translator, TranslatorConfig, examples_from_pairs, finetune_pairs,
                         load_translator, pretrain_denoise, save_translator, translate_batch)
from .units import collapse, inflate

MANIFEST = "manifest.tsv"
SPLITS = "splits.json"
META = "corpus.json"
CHECKPOINTS = {"translator": "translator.ckpt", "duration": "duration.ckpt", "f0": "f0.ckpt"}
SPLIT_NAMES = ("train", "valid", "test")

Log = Callable[[str], None]


class PipelineError(ValueError):
    """Missing or inconsistent inputs (a validation failure, not a crash)."""


def _quiet(_msg: str) -> None:
    pass


# -- atomic outputs ----------------------------------------------------------

@contextlib.contextmanager
def atomic_path(target: Path, is_dir: bool = False):
    """Yield a temporary path; move it onto ``target`` only if the block succeeds."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.tmp{os.getpid()}")
    _remove(tmp)
    if is_dir:
        tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        _remove(tmp)
        raise
    _remove(target)
    os.replace(tmp, target)


def _remove(p: Path) -> None:
    if p.is_dir() and not p.is_symlink():
        shutil.rmtree(p)
    elif p.exists() or p.is_symlink():
        p.unlink()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def report_config(cfg: PipelineConfig) -> dict:
    d = cfg.to_dict()
    d.pop("paths")
    return d


# -- corpus ------------------------------------------------------------------

def build_corpus(cfg: PipelineConfig):
    """In-memory corpus and its transcript-disjoint split, fully determined by the config."""
    utts = generate_corpus(cfg.corpus_config(), seed=cfg.seed)
    parts = split_groups(utts, cfg.corpus.split, seed=cfg.seed)
    return utts, dict(zip(SPLIT_NAMES, parts))


def gen_corpus(cfg: PipelineConfig, out_dir: Path | None = None, log: Log = _quiet) -> Path:
    out_dir = Path(out_dir) if out_dir else cfg.path("corpus")
    utts, splits = build_corpus(cfg)
    with atomic_path(out_dir, is_dir=True) as tmp:
        write_manifest(tmp / MANIFEST, utts, tmp / "data")
        _write_json(tmp / SPLITS, {"config_hash": cfg.hash(),
                                   **{k: sorted({u.transcript_group for u in v})
                                      for k, v in splits.items()}})
        _write_json(tmp / META, {"config_hash": cfg.hash(), "seed": cfg.seed,
                                 "utterances": len(utts), "emotions": list(cfg.emotions),
                                 "speakers": len(cfg.corpus.speakers),
                                 "vocab_size": cfg.corpus.vocab_size,
                                 "content_units": cfg.corpus.content_units})
    log(f"wrote {len(utts)} utterances to {out_dir}")
    return out_dir


def load_corpus(cfg: PipelineConfig, corpus_dir: Path | None = None) -> tuple[list, dict, dict]:
    """``(utterances, {split: utterances}, meta)`` from a generated corpus directory."""
    d = Path(corpus_dir) if corpus_dir else cfg.path("corpus")
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise PipelineError(f"missing corpus manifest: {manifest} (run gen-corpus first)")
    for name in (SPLITS, META):
        if not (d / name).is_file():
            raise PipelineError(f"missing corpus file: {d / name}")
    utts = load_manifest(manifest, cfg.corpus.vocab_size)
    split_groups_ = json.loads((d / SPLITS).read_text(encoding="utf-8"))
    meta = json.loads((d / META).read_text(encoding="utf-8"))
    lookup = {g: name for name in SPLIT_NAMES for g in split_groups_[name]}
    splits = {name: [] for name in SPLIT_NAMES}
    for u in utts:
        if u.transcript_group not in lookup:
            raise PipelineError(f"{u.id}: transcript group {u.transcript_group!r} is in no split")
        splits[lookup[u.transcript_group]].append(u)
    return list(utts), splits, meta


def training_pairs(cfg: PipelineConfig, train_utts: Sequence[Utterance]) -> list:
    pairs = make_parallel_pairs(train_utts)
    cap = cfg.training.max_pairs
    if cap and cap < len(pairs):
        keep = np.random.default_rng([cfg.seed, 31]).choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    return pairs


# -- training stages ---------------------------------------------------------

def _ckpt(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.path("models") / CHECKPOINTS[stage]


def _save_checkpoint(path: Path, header: dict, params) -> None:
    with atomic_path(path) as tmp:
        nn.save_checkpoint(tmp, header, params)


def fit_translator(cfg: PipelineConfig, splits: dict, pretrain: bool = False,
                   log: Log = _quiet) -> Translator:
    t = cfg.translator
    model = Translator(TranslatorConfig(scheme=t.scheme, emotions=cfg.emotions,
                                        vocab_size=cfg.corpus.vocab_size, d_model=t.d_model,
                                        ffn=t.ffn, layers=t.layers, heads=t.heads,
                                        dropout=t.dropout, seed=cfg.seed, beam=t.beam))
    if pretrain:
        seqs = [collapse(u.units) for u in splits["train"]]
        valid = [collapse(u.units) for u in splits["valid"]]
        log(f"pretraining on {len(seqs)} unpaired sequences")
        pretrain_denoise(model, seqs, cfg.noise_config(), cfg.train_config("pretrain"), log, valid)
    pairs = training_pairs(cfg, splits["train"])
    log(f"fine-tuning on {len(pairs)} pairs")
    finetune_pairs(model, examples_from_pairs(pairs), cfg.train_config("translator"),
                   valid=examples_from_pairs(make_parallel_pairs(splits["valid"])), log=log)
    return model


def train_translator(cfg: PipelineConfig, pretrain: bool | None = None, log: Log = _quiet) -> Path:
    _, splits, _ = load_corpus(cfg)
    pretrain = cfg.translator.pretrain if pretrain is None else pretrain
    model = fit_translator(cfg, splits, pretrain, log)
    path = _ckpt(cfg, "translator")
    with atomic_path(path) as tmp:
        save_translator(model, tmp, {"config_hash": cfg.hash(), "pretrained": bool(pretrain)})
    log(f"saved {path}")
    return path


def _duration_data(utts, emotion):
    return [u.deduped for u in utts if u.emotion == emotion]


def fit_durations(cfg: PipelineConfig, splits: dict, variant: str | None = None,
                  n: int | None = None, log: Log = _quiet) -> dict:
    """One duration model per emotion."""
    variant = variant or cfg.duration.variant
    models = {}
    for emo in cfg.emotions:
        data = _duration_data(splits["train"], emo)
        if variant == "cnn":
            models[emo] = train_duration_cnn(data, cfg.corpus.vocab_size, cfg.train_config("duration"),
                                             valid=_duration_data(splits["valid"], emo),
                                             log=lambda m, e=emo: log(f"[{e}] {m}"))
        else:
            models[emo] = train_duration_ngram(data, n or cfg.duration.n)
    return models


def train_duration(cfg: PipelineConfig, log: Log = _quiet) -> Path:
    _, splits, _ = load_corpus(cfg)
    models = fit_durations(cfg, splits, log=log)
    header = {"model_kind": "duration", "variant": cfg.duration.variant,
              "emotions": list(cfg.emotions), "config_hash": cfg.hash()}
    params = {}
    if cfg.duration.variant == "cnn":
        header["hparams"] = models[cfg.emotions[0]].net.hparams
        for emo, m in models.items():
            params.update({f"{emo}/{k}": v for k, v in m.net.state_dict().items()})
    else:
        header["tables"] = {emo: m.to_dict() for emo, m in models.items()}
    path = _ckpt(cfg, "duration")
    _save_checkpoint(path, header, params)
    log(f"saved {path}")
    return path


def f0_bins(cfg: PipelineConfig, train_utts, strategy: str | None = None,
            normalization: str | None = None) -> binning.BinSpec:
    mode = normalization or cfg.f0.normalization
    stats = binning.fit_speaker_stats(train_utts)
    values = np.concatenate([binning.normalize_f0(u.f0, stats[u.speaker], mode)[u.f0 > 0]
                             for u in train_utts])
    return binning.make_bins(values, strategy or cfg.f0.strategy, cfg.f0.d, mode, stats)


def fit_f0(cfg: PipelineConfig, splits: dict, strategy: str | None = None,
           normalization: str | None = None, log: Log = _quiet) -> F0Model:
    bins = f0_bins(cfg, splits["train"], strategy, normalization)
    sigma = cfg.f0.blur_sigma
    train = [encode_example(u, bins, sigma) for u in splits["train"]]
    valid = [encode_example(u, bins, sigma) for u in splits["valid"]]
    return train_f0(train, bins, cfg.emotions, cfg.train_config("f0"), valid, log,
                    vocab_size=cfg.corpus.vocab_size, channels=cfg.f0.channels,
                    layers=cfg.f0.layers, kernel=cfg.f0.kernel)


def train_f0_stage(cfg: PipelineConfig, log: Log = _quiet) -> Path:
    _, splits, _ = load_corpus(cfg)
    model = fit_f0(cfg, splits, log=log)
    path = _ckpt(cfg, "f0")
    _save_checkpoint(path, {"model_kind": "f0", **model.header(), "config_hash": cfg.hash()},
                     model.net.state_dict())
    log(f"saved {path}")
    return path


def train(cfg: PipelineConfig, stage: str, pretrain: bool | None = None, log: Log = _quiet) -> list[Path]:
    stages = ("translator", "duration", "f0") if stage == "all" else (stage,)
    load_corpus(cfg)    # fail fast, before any training
    out = []
    for s in stages:
        if s == "translator":
            out.append(train_translator(cfg, pretrain, log))
        elif s == "duration":
            out.append(train_duration(cfg, log))
        elif s == "f0":
            out.append(train_f0_stage(cfg, log))
        else:
            raise PipelineError(f"unknown stage {s!r}")
    return out


# -- loading -----------------------------------------------------------------

@dataclass
class LoadedModels:
    translator: Translator
    durations: dict
    f0: F0Model
    hashes: dict


def _load_header(path: Path, kind: str):
    if not path.is_file():
        raise PipelineError(f"missing {kind} checkpoint: {path} (run train --stage {kind})")
    header, params = nn.load_checkpoint(path)
    if header.get("model_kind") != kind:
        raise PipelineError(f"{path}: expected a {kind} checkpoint, found {header.get('model_kind')!r}")
    return header, params


def load_durations(path: Path) -> tuple[dict, dict]:
    header, params = _load_header(path, "duration")
    models = {}
    for emo in header["emotions"]:
        if header["variant"] == "cnn":
            net = DurationCNN(**header["hparams"])
            prefix = f"{emo}/"
            net.load_state_dict({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
            net.eval()
            models[emo] = CNNDurationModel(net)
        else:
            models[emo] = NgramDurationModel.from_dict(header["tables"][emo])
    return models, header


def load_f0(path: Path) -> tuple[F0Model, dict]:
    header, params = _load_header(path, "f0")
    arch = {k: header[k] for k in ("vocab_size", "n_emotions", "d", "channels", "kernel", "layers",
                                   "emb", "emo_dim", "dropout", "seed")}
    net = F0Net(**arch)
    net.load_state_dict(params)
    net.eval()
    return F0Model(net, binning.BinSpec.from_dict(header["bins"]), header["emotions"]), header


def load_models(cfg: PipelineConfig) -> LoadedModels:
    path = _ckpt(cfg, "translator")
    _load_header(path, "translator")
    translator, th = load_translator(path)
    durations, dh = load_durations(_ckpt(cfg, "duration"))
    f0, fh = load_f0(_ckpt(cfg, "f0"))
    hashes = {"translator": th.get("config_hash"), "duration": dh.get("config_hash"),
              "f0": fh.get("config_hash")}
    return LoadedModels(translator, durations, f0, hashes)


def check_hashes(cfg: PipelineConfig, hashes: dict, force: bool = False, log: Log = _quiet) -> None:
    expected = cfg.hash()
    bad = {k: v for k, v in sorted(hashes.items()) if v != expected}
    if not bad:
        return
    detail = ", ".join(f"{k}={v}" for k, v in bad.items())
    msg = f"artifacts built from a different config (expected {expected}): {detail}"
    if not force:
        raise PipelineError(msg + "; pass --force to evaluate anyway")
    log("warning: " + msg)


# -- evaluation --------------------------------------------------------------

def pipeline_models(cfg: PipelineConfig, models: LoadedModels, pairs) -> PipelineModels:
    """Wrap loaded models for :func:`evaluate_pipeline`; translations are batched up front."""
    cache = {}
    by_target: dict[str, list] = {}
    for p in pairs:
        by_target.setdefault(p.target.emotion, []).append(tuple(collapse(p.source.units)))
    for emo, sources in sorted(by_target.items()):
        uniq = sorted(set(sources))
        for src, hyp in zip(uniq, translate_batch(models.translator, uniq, emo)):
            cache[(src, emo)] = hyp

    def translate(src, src_emo, tgt_emo, speaker):
        key = (tuple(src), tgt_emo)
        if key not in cache:
            cache[key] = translate_batch(models.translator, [key[0]], tgt_emo)[0]
        return cache[key]

    def durations(units, emo, speaker, seed):
        if emo not in models.durations:
            raise PipelineError(f"no duration model for emotion {emo!r}")
        return models.durations[emo].predict(units, seed=seed)

    rule = cfg.f0.decode_rule
    return PipelineModels(translate=translate, durations=durations,
                          f0=lambda frames, emo, spk: models.f0.predict(frames, emo, spk, rule),
                          vocab_size=cfg.corpus.vocab_size, content_units=cfg.corpus.content_units)


def run_evaluation(cfg: PipelineConfig, splits: dict, models: LoadedModels) -> EvalReport:
    pairs = make_parallel_pairs(splits["test"])
    return evaluate_pipeline(pipeline_models(cfg, models, pairs), pairs, seed=cfg.seed,
                             config=report_config(cfg), config_hash=cfg.hash())


def evaluate(cfg: PipelineConfig, out_dir: Path | None = None, force: bool = False,
             figures: bool = True, log: Log = _quiet) -> EvalReport:
    _, splits, meta = load_corpus(cfg)
    models = load_models(cfg)
    check_hashes(cfg, {"corpus": meta.get("config_hash"), **models.hashes}, force, log)
    report = run_evaluation(cfg, splits, models)
    out_dir = Path(out_dir) if out_dir else cfg.path("output") / "eval"
    with atomic_path(out_dir, is_dir=True) as tmp:
        (tmp / "report.json").write_text(report.to_text(), encoding="utf-8")
        (tmp / "per_pair.tsv").write_text(report.to_tsv(), encoding="utf-8")
        (tmp / "rating_manifest.tsv").write_text(report.rating_manifest("audio", cfg.emotions),
                                                 encoding="utf-8")
        if figures:
            from . import plotting
            plotting.eval_figures(report, tmp / "figures")
    log(f"wrote evaluation to {out_dir}")
    return report


# -- conversion and synthesis ------------------------------------------------

def convert(cfg: PipelineConfig, manifest: Path, emotion: str, out_dir: Path | None = None,
            log: Log = _quiet) -> Path:
    """Translate, predict durations and F0, and write frame-rate units + F0 + durations."""
    if emotion not in cfg.emotions:
        raise PipelineError(f"emotion {emotion!r} not in configured emotions {list(cfg.emotions)}")
    utts = load_manifest(manifest, cfg.corpus.vocab_size)
    if not utts:
        raise PipelineError(f"{manifest}: no utterances")
    models = load_models(cfg)
    check_hashes(cfg, models.hashes, log=log)
    sources = [tuple(collapse(u.units)) for u in utts]
    hyps = translate_batch(models.translator, sources, emotion)
    out_dir = Path(out_dir) if out_dir else cfg.path("output") / "converted" / emotion
    converted, dur_rows = [], []
    for i, (u, hyp) in enumerate(zip(utts, hyps)):
        if not hyp:
            log(f"warning: {u.id}: empty translation, skipped")
            continue
        durs = models.durations[emotion].predict(hyp, seed=[cfg.seed, i])
        frames = inflate(hyp, durs)
        f0 = models.f0.predict(frames, emotion, u.speaker, cfg.f0.decode_rule)
        out = Utterance(f"{u.id}__to_{emotion}", u.speaker, emotion, u.transcript_group, frames, f0)
        converted.append(out)
        dur_rows.append((out.id, hyp, durs))
    with atomic_path(out_dir, is_dir=True) as tmp:
        write_manifest(tmp / MANIFEST, converted, tmp / "data")
        for uid, units, durs in dur_rows:
            (tmp / "data" / f"{uid}.dur").write_text(
                "".join(f"{a}\t{b}\n" for a, b in zip(units, durs)), encoding="utf-8")
        _write_json(tmp / "conversion.json", {"config_hash": cfg.hash(), "emotion": emotion,
                                              "source_manifest": str(manifest),
                                              "utterances": len(converted)})
    log(f"converted {len(converted)} utterances to {out_dir}")
    return out_dir


def synth(cfg: PipelineConfig, manifest: Path, out_dir: Path | None = None, log: Log = _quiet) -> Path:
    utts = load_manifest(manifest, cfg.corpus.vocab_size)
    if not utts:
        raise PipelineError(f"{manifest}: no utterances")
    timbre = dsp.TimbreTable.default(cfg.corpus.vocab_size, range(len(cfg.corpus.speakers)),
                                     cfg.emotions, seed=cfg.seed)
    out_dir = Path(out_dir) if out_dir else Path(manifest).parent / "audio"
    with atomic_path(out_dir, is_dir=True) as tmp:
        for i, u in enumerate(utts):
            wav = dsp.synthesize(u.units, u.f0, u.speaker, u.emotion, timbre, seed=[cfg.seed, i])
            dsp.write_wav(tmp / f"{u.id}.wav", wav)
        _write_json(tmp / "synthesis.json", {"config_hash": cfg.hash(), "utterances": len(utts),
                                             "sample_rate": dsp.SAMPLE_RATE})
    log(f"synthesised {len(utts)} files to {out_dir}")
    return out_dir


# -- benchmarks --------------------------------------------------------------

F0_GRID_FIELDS = ("seed", "strategy", "normalization", "decode_rule", "f0_mae_hz")
DURATION_FIELDS = ("seed", "model", "mae_frames", "acc@0ms", "acc@20ms", "acc@40ms")
DURATION_MODELS = (("cnn", None), ("5-gram", 5), ("3-gram", 3), ("1-gram", 1))


def f0_grid(cfg: PipelineConfig, seeds: Sequence[int], log: Log = _quiet) -> list[dict]:
    """Held-out voiced-frame MAE for every strategy x normalization x decode rule."""
    rows = []
    for seed in seeds:
        c = cfg.with_seed(seed)
        _, splits = build_corpus(c)
        test = splits["test"]
        truth = np.concatenate([u.f0 for u in test])
        for strategy in binning.STRATEGIES:
            for norm in binning.NORMALIZATIONS:
                model = fit_f0(c, splits, strategy, norm)
                for rule in binning.DECODE_RULES:
                    pred = model.predict_many([(u.units, u.emotion, u.speaker) for u in test], rule)
                    mae = binning.f0_mae_voiced(np.concatenate(pred), truth)
                    rows.append(dict(zip(F0_GRID_FIELDS, (seed, strategy, norm, rule, mae))))
                    log(f"f0 seed {seed} {strategy}/{norm}/{rule}: {mae:.3f} Hz")
    return rows


def duration_table(cfg: PipelineConfig, seeds: Sequence[int], log: Log = _quiet) -> list[dict]:
    """Held-out duration metrics for the CNN and the 5/3/1-gram models (per-emotion models, pooled scores)."""
    rows = []
    for seed in seeds:
        c = cfg.with_seed(seed)
        _, splits = build_corpus(c)
        for name, n in DURATION_MODELS:
            models = fit_durations(c, splits, "cnn" if n is None else "ngram", n)
            pred, tgt = [], []
            for i, u in enumerate(splits["test"]):
                units, durs = u.deduped
                pred.extend(models[u.emotion].predict(units, seed=[seed, 17, i]))
                tgt.extend(durs)
            m = duration_metrics(pred, tgt)
            rows.append({"seed": seed, "model": name, **{k: m[k] for k in DURATION_FIELDS[2:]}})
            log(f"duration seed {seed} {name}: mae {m['mae_frames']:.4f}")
    return rows


def median_rows(rows: list[dict], keys: Sequence[str], value_fields: Sequence[str]) -> list[dict]:
    """Per-configuration median over seeds, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        row = {"seed": "median", **dict(zip(keys, key))}
        for f in value_fields:
            row[f] = float(np.median([m[f] for m in members]))
        out.append(row)
    return out


def rows_to_tsv(rows: list[dict], fields: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.6f}"
        return str(v)
    lines = ["\t".join(fields)] + ["\t".join(fmt(r[f]) for f in fields) for r in rows]
    return "\n".join(lines) + "\n"


def benchmark(cfg: PipelineConfig, seeds: Sequence[int], out_dir: Path | None = None,
              which: Sequence[str] = ("f0", "duration"), figures: bool = True,
              log: Log = _quiet) -> dict:
    out_dir = Path(out_dir) if out_dir else cfg.path("output") / "benchmark"
    result = {}
    if "f0" in which:
        rows = f0_grid(cfg, seeds, log)
        result["f0_grid"] = rows + median_rows(rows, F0_GRID_FIELDS[1:4], ["f0_mae_hz"])
    if "duration" in which:
        rows = duration_table(cfg, seeds, log)
        result["duration_table"] = rows + median_rows(rows, ["model"], DURATION_FIELDS[2:])
    with atomic_path(out_dir, is_dir=True) as tmp:
        if "f0_grid" in result:
            (tmp / "f0_grid.tsv").write_text(rows_to_tsv(result["f0_grid"], F0_GRID_FIELDS), encoding="utf-8")
        if "duration_table" in result:
            (tmp / "duration_table.tsv").write_text(rows_to_tsv(result["duration_table"], DURATION_FIELDS),
                                                    encoding="utf-8")
        _write_json(tmp / "benchmark.json", {"config_hash": cfg.hash(), "seeds": list(seeds)})
        if figures:
            from . import plotting
            if "f0_grid" in result:
                plotting.f0_grid_figure(result["f0_grid"], tmp / "f0_grid.png")
            if "duration_table" in result:
                plotting.duration_figure(result["duration_table"], tmp / "duration_table.png")
    log(f"wrote benchmark tables to {out_dir}")
    return result
