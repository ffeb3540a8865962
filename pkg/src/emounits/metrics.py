"""Objective evaluation: UER, BLEU, content recovery and the evaluation report."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .prosody.bins import f0_mae_voiced
from .prosody.duration import duration_metrics
from .units import FRAME_MS, collapse, dedup, inflate

BLEU_EPSILON = 1e-9
BLEU_SMOOTHING = f"add-epsilon({BLEU_EPSILON:g}) on zero n-gram matches for n>=2"


class MetricError(ValueError):
    pass


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        sub = prev[:-1] + (np.asarray(b) != x)
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub[j - 1])
        prev = cur
    return int(prev[-1])


def uer(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """Unit error rate: edit distance over reference length (can exceed 1)."""
    if not len(ref):
        raise MetricError("UER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def bleu(refs: Sequence[Sequence[int]], hyp: Sequence[int], max_n: int = 4) -> float:
    """Sentence BLEU in [0, 100] with clipped counts over several references.

    A zero match count at order n >= 2 is replaced by epsilon so one missing
    4-gram does not zero the score; zero unigram matches give 0.
    """
    refs = [list(r) for r in refs if len(r)]
    if not refs:
        raise MetricError("BLEU needs at least one non-empty reference")
    hyp = list(hyp)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matched = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(sum(counts.values()), 1)
        if matched == 0:
            if n == 1:
                return 0.0
            matched = BLEU_EPSILON
        log_p += math.log(matched / total) / max_n
    c = len(hyp)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def content_recovery(src_content: Sequence[int], hyp: Sequence[int], reserved: range) -> float:
    """Share of source content units recovered, in order, by the hypothesis.

    Reserved (vocalisation) ids are dropped from both sides before the LCS.
    """
    src = collapse([u for u in src_content if u not in reserved])
    if not src:
        raise MetricError("source has no content units")
    filtered = collapse([u for u in hyp if u not in reserved])
    return lcs_length(src, filtered) / len(src)


# -- report ------------------------------------------------------------------

PER_PAIR_FIELDS = ("source_id", "target_id", "source_emotion", "target_emotion", "uer", "bleu",
                   "content_recovery", "f0_mae_hz", "duration_mae_frames", "acc@0ms",
                   "acc@20ms", "acc@40ms", "hyp_len", "ref_len")
AGGREGATE_FIELDS = ("uer", "bleu", "content_recovery", "f0_mae_hz", "duration_mae_frames",
                    "acc@0ms", "acc@20ms", "acc@40ms")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


@dataclass
class EvalReport:
    per_pair: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "aggregate": {k: round(v, 6) for k, v in self.aggregate.items()},
            "bleu_smoothing": BLEU_SMOOTHING,
            "config": self.config,
            "config_hash": self.config_hash,
            "counts": self.counts,
            "seed": self.seed,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        lines = ["\t".join(PER_PAIR_FIELDS)]
        for row in self.per_pair:
            lines.append("\t".join(_fmt(row[k]) for k in PER_PAIR_FIELDS))
        return "\n".join(lines) + "\n"

    def rating_manifest(self, audio_dir: str = "audio", emotions: Sequence[str] = ()) -> str:
        """Listening-test sheet: utterance id, audio path, candidate emotions."""
        cands = ",".join(emotions or sorted({r["target_emotion"] for r in self.per_pair}))
        lines = ["utterance_id\taudio_path\tcandidate_emotions"]
        for row in self.per_pair:
            uid = f"{row['source_id']}__to_{row['target_emotion']}"
            lines.append(f"{uid}\t{audio_dir}/{uid}.wav\t{cands}")
        return "\n".join(lines) + "\n"


def aggregate_rows(rows: Sequence[Mapping]) -> dict:
    """Mean of each metric over the rows where it is defined (compensated sums)."""
    agg = {}
    for k in AGGREGATE_FIELDS:
        vals = [r[k] for r in rows if not math.isnan(r[k])]
        agg[k] = math.fsum(vals) / len(vals) if vals else float("nan")
    return agg


# -- pipeline evaluation -----------------------------------------------------

@dataclass
class PipelineModels:
    """Callables used by :func:`evaluate_pipeline`.

    ``translate(src_units, source_emotion, target_emotion, speaker) -> units``;
    ``durations(units, target_emotion, speaker, seed) -> durations``;
    ``f0(frame_units, target_emotion, speaker) -> f0_hz``.
    """
    translate: Callable
    durations: Callable
    f0: Callable
    vocab_size: int
    content_units: int


def oracle_models(pairs, vocab_size: int = 64, content_units: int = 48) -> PipelineModels:
    """Ground-truth passthrough models, for checking the evaluation plumbing."""
    by_src = {(tuple(collapse(p.source.units)), p.target.emotion, p.source.speaker):
              p.target for p in pairs}
    by_units = {}
    for p in pairs:
        u, d = dedup(p.target.units)
        by_units[(tuple(u), p.target.emotion, p.target.speaker, "dur")] = d
        by_units[(tuple(p.target.units), p.target.emotion, p.target.speaker)] = p.target.f0

    def translate(src, src_emo, tgt_emo, speaker):
        try:
            return collapse(by_src[(tuple(src), tgt_emo, speaker)].units)
        except KeyError:
            raise MetricError("oracle has no target for this source") from None

    return PipelineModels(
        translate=translate,
        durations=lambda units, emo, spk, seed: list(by_units[(tuple(units), emo, spk, "dur")]),
        f0=lambda frames, emo, spk: np.asarray(by_units[(tuple(frames), emo, spk)]),
        vocab_size=vocab_size, content_units=content_units)


def evaluate_pipeline(models: PipelineModels, test_pairs, seed: int = 0, config: dict | None = None,
                      config_hash: str = "") -> EvalReport:
    """Translate every test pair and score content; score prosody models on the target units.

    Durations are predicted for the ground-truth deduped target and F0 for its
    frame-rate units, so the prosody metrics isolate those models.
    """
    reserved = range(models.content_units, models.vocab_size)
    rows = []
    for i, p in enumerate(test_pairs):
        src_u = collapse(p.source.units)
        tgt_u, tgt_d = dedup(p.target.units)
        if any(u >= models.vocab_size for u in list(src_u) + list(tgt_u)):
            raise MetricError(f"pair {p.source.id}: units outside vocabulary {models.vocab_size}")
        hyp = models.translate(src_u, p.source.emotion, p.target.emotion, p.source.speaker)
        pred_d = models.durations(tgt_u, p.target.emotion, p.target.speaker, [seed, i])
        dm = duration_metrics(pred_d, tgt_d)
        f0_pred = models.f0(tuple(p.target.units), p.target.emotion, p.target.speaker)
        f0_tgt = np.asarray(p.target.f0)
        f0_mae = f0_mae_voiced(f0_pred, f0_tgt) if (f0_tgt > 0).any() else float("nan")
        rows.append({
            "source_id": p.source.id, "target_id": p.target.id,
            "source_emotion": p.source.emotion, "target_emotion": p.target.emotion,
            "uer": uer(tgt_u, hyp), "bleu": bleu([tgt_u], hyp),
            "content_recovery": content_recovery(src_u, hyp, reserved),
            "f0_mae_hz": f0_mae, "duration_mae_frames": dm["mae_frames"],
            "acc@0ms": dm["acc@0ms"], "acc@20ms": dm["acc@20ms"], "acc@40ms": dm["acc@40ms"],
            "hyp_len": len(hyp), "ref_len": len(tgt_u),
        })
    counts = {"pairs": len(rows), "frames_ms": FRAME_MS,
              "target_units": int(sum(r["ref_len"] for r in rows))}
    return EvalReport(rows, aggregate_rows(rows), counts, dict(config or {}), seed, config_hash)
