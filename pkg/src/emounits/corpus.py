"""Synthetic parallel-emotion corpus, manifest I/O, pairing and splitting.

The synthetic grammar: a lexicon of words, each a short run of content units;
a transcript is a word sequence with a separator unit (silence) between
words and at both ends.  Ids ``[0, content_units)`` are content, ids
``[content_units, vocab_size)`` are reserved for non-verbal vocalisations
(laughter, yawn, groan motifs) that only emotional renditions contain.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .units import dedup, inflate, read_units, write_units

log = logging.getLogger(__name__)

EMOTIONS = ("neutral", "amused", "angry", "sleepy", "disgusted")
SEPARATOR = 0


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: int
    emotion: str
    transcript_group: str
    units: tuple
    f0: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        f0 = np.array(self.f0, dtype=np.float64)
        if f0.ndim != 1 or len(f0) != len(self.units):
            raise CorpusError(f"{self.id}: {len(self.units)} units but {f0.size} F0 frames")
        if not np.all(np.isfinite(f0)) or np.any(f0 < 0):
            raise CorpusError(f"{self.id}: F0 must be finite and non-negative")
        f0.setflags(write=False)
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        if self.emotion not in EMOTIONS:
            raise CorpusError(f"{self.id}: unknown emotion {self.emotion!r}")

    @property
    def deduped(self) -> tuple[list[int], list[int]]:
        return dedup(self.units)

    def __len__(self):
        return len(self.units)


@dataclass(frozen=True)
class ParallelPair:
    source: Utterance
    target: Utterance

    def __post_init__(self):
        if self.source.transcript_group != self.target.transcript_group:
            raise CorpusError("pair members must share a transcript group")
        if self.source.emotion == self.target.emotion:
            raise CorpusError("pair members must differ in emotion")


@dataclass(frozen=True)
class Motif:
    units: tuple
    probability: float
    position: str = "end"       # "end": after the final word, "start": before the first word
    frames_per_unit: int = 3
    pitch_offset: float = 1.0   # motif F0 relative to speaker mean, in speaker sigmas

    def __post_init__(self):
        if self.position not in ("start", "end"):
            raise CorpusError(f"motif position must be 'start' or 'end', got {self.position!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise CorpusError("motif probability must be in [0, 1]")


@dataclass(frozen=True)
class EmotionTransformSpec:
    motifs: tuple = ()
    duration_scale: float = 1.0
    f0_shift: float = 0.0       # in speaker sigmas
    f0_variance_scale: float = 1.0

    def __post_init__(self):
        if self.duration_scale <= 0 or self.f0_variance_scale <= 0:
            raise CorpusError("scale factors must be positive")


@dataclass(frozen=True)
class SpeakerSpec:
    base_hz: float
    sigma_hz: float


def default_transforms(content_units: int = 48) -> dict:
    c = content_units
    return {
        "amused": EmotionTransformSpec(
            motifs=(Motif((c, c + 1, c), 0.8, "end", pitch_offset=1.5),), f0_shift=0.5),
        "angry": EmotionTransformSpec(duration_scale=0.8, f0_shift=0.8, f0_variance_scale=1.5),
        "sleepy": EmotionTransformSpec(
            motifs=(Motif((c + 2, c + 3), 0.5, "start", frames_per_unit=5, pitch_offset=-1.0),),
            duration_scale=1.6, f0_shift=-0.5),
        "disgusted": EmotionTransformSpec(
            motifs=(Motif((c + 4, c + 5, c + 4), 0.5, "end", pitch_offset=-0.8),),
            duration_scale=1.1, f0_shift=-0.2),
    }


@dataclass
class CorpusConfig:
    n_transcripts: int = 100
    content_units: int = 48
    vocab_size: int = 64
    n_words: int = 40
    word_length: tuple = (2, 4)
    words_per_transcript: tuple = (3, 6)
    word_successors: int = 3           # allowed next words per word; 0 = any order
    speakers: tuple = (SpeakerSpec(110.0, 15.0), SpeakerSpec(210.0, 25.0))
    emotions: dict = field(default_factory=default_transforms)
    n_unvoiced: int = 6
    # synthetic duration law (frames): base per unit plus context effects
    base_duration: tuple = (2, 6)
    final_lengthening: float = 2.0
    prev_effect: float = 1.5
    prev3_effect: float = 1.0
    duration_noise: float = 0.35
    separator_duration: tuple = (3, 7)
    # synthetic F0 law, in speaker sigmas
    unit_pitch_spread: float = 0.8
    declination: float = 0.6
    f0_noise: float = 0.15          # bounded per-frame jitter
    utterance_offset: float = 0.3   # per-utterance register shift, clipped at 2x

    def validate(self):
        if self.n_words <= 0:
            raise CorpusError("word inventory size must be positive")
        if self.word_successors < 0:
            raise CorpusError("word_successors must be >= 0")
        if not self.emotions:
            raise CorpusError("emotion set is empty")
        for emo in self.emotions:
            if emo not in EMOTIONS or emo == "neutral":
                raise CorpusError(f"unsupported emotion {emo!r}")
        if not 0 < self.content_units <= self.vocab_size:
            raise CorpusError("content_units must be in (0, vocab_size]")
        if self.content_units <= self.n_unvoiced + 2:
            raise CorpusError("too few content units")
        if self.n_transcripts <= 0 or not self.speakers:
            raise CorpusError("need at least one transcript and one speaker")
        for name, spec in self.emotions.items():
            check_transform(spec, self.content_units, self.vocab_size)


def check_transform(spec: EmotionTransformSpec, content_units: int, vocab_size: int):
    for m in spec.motifs:
        for u in m.units:
            if not content_units <= u < vocab_size:
                raise CorpusError(
                    f"motif unit {u} outside reserved range [{content_units}, {vocab_size})")


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


# -- generation --------------------------------------------------------------

@dataclass(frozen=True)
class _Grammar:
    words: tuple
    base: np.ndarray
    long_prev: np.ndarray
    long_prev3: np.ndarray
    unit_pitch: np.ndarray
    unvoiced: frozenset
    successors: tuple = ()


def _make_grammar(cfg: CorpusConfig, rng: np.random.Generator) -> _Grammar:
    voiced_lo = 1
    words = []
    for _ in range(cfg.n_words):
        n = int(rng.integers(cfg.word_length[0], cfg.word_length[1] + 1))
        w = [int(rng.integers(voiced_lo, cfg.content_units))]
        while len(w) < n:
            u = int(rng.integers(voiced_lo, cfg.content_units))
            if u != w[-1]:
                w.append(u)
        words.append(tuple(w))
    k = cfg.content_units
    grammar = _Grammar(
        words=tuple(words),
        base=rng.integers(cfg.base_duration[0], cfg.base_duration[1] + 1, size=k),
        long_prev=rng.random(k) < 0.5,
        long_prev3=rng.random(k) < 0.5,
        unit_pitch=rng.uniform(-cfg.unit_pitch_spread, cfg.unit_pitch_spread, size=k),
        unvoiced=frozenset(range(1, 1 + cfg.n_unvoiced)) | {SEPARATOR},
    )
    if cfg.word_successors:
        m = min(cfg.word_successors, cfg.n_words)
        succ = tuple(tuple(int(x) for x in rng.choice(cfg.n_words, size=m, replace=False))
                     for _ in range(cfg.n_words))
        grammar = replace(grammar, successors=succ)
    return grammar


def _neutral_durations(units: Sequence[int], cfg: CorpusConfig, g: _Grammar,
                       rng: np.random.Generator) -> list[int]:
    out = []
    n = len(units)
    for i, u in enumerate(units):
        if u == SEPARATOR:
            out.append(int(rng.integers(cfg.separator_duration[0], cfg.separator_duration[1] + 1)))
            continue
        d = float(g.base[u])
        if i > 0 and g.long_prev[units[i - 1]]:
            d += cfg.prev_effect
        if i > 2 and g.long_prev3[units[i - 3]]:
            d += cfg.prev3_effect
        if i + 1 < n and units[i + 1] == SEPARATOR:
            d += cfg.final_lengthening
        d += rng.normal(0.0, cfg.duration_noise)
        out.append(max(1, int(round_half_up(d))))
    return out


def _neutral_f0(units: Sequence[int], speaker: SpeakerSpec, cfg: CorpusConfig, g: _Grammar,
                rng: np.random.Generator) -> np.ndarray:
    T = len(units)
    pos = np.linspace(0.5, -0.5, T) if T > 1 else np.zeros(T)
    z = np.array([g.unit_pitch[u] if u < len(g.unit_pitch) else 0.0 for u in units])
    register = float(np.clip(rng.normal(0.0, cfg.utterance_offset),
                             -2 * cfg.utterance_offset, 2 * cfg.utterance_offset))
    z = z + cfg.declination * pos + register + rng.uniform(-cfg.f0_noise, cfg.f0_noise, T)
    f0 = speaker.base_hz + speaker.sigma_hz * z
    voiced = np.array([u not in g.unvoiced for u in units], dtype=bool)
    return np.where(voiced, np.maximum(f0, 1.0), 0.0)


def _transcript(cfg: CorpusConfig, g: _Grammar, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(cfg.words_per_transcript[0], cfg.words_per_transcript[1] + 1))
    seq = [SEPARATOR]
    wi = int(rng.integers(0, len(g.words)))
    for k in range(n):
        if k:
            wi = int(rng.choice(g.successors[wi])) if g.successors else int(rng.integers(0, len(g.words)))
        seq.extend(g.words[wi])
        seq.append(SEPARATOR)
    return seq


def generate_corpus(cfg: CorpusConfig, seed: int) -> list[Utterance]:
    """One neutral utterance per (transcript, speaker) plus one per configured emotion."""
    cfg.validate()
    g = _make_grammar(cfg, np.random.default_rng([seed, 0xC0]))
    corpus = []
    for gi in range(cfg.n_transcripts):
        rng = np.random.default_rng([seed, 1, gi])
        words = _transcript(cfg, g, rng)
        group = f"t{gi:05d}"
        for si, spk in enumerate(cfg.speakers):
            durs = _neutral_durations(words, cfg, g, rng)
            units = inflate(words, durs)
            neutral = Utterance(f"{group}_s{si}_neutral", si, "neutral", group, units,
                                _neutral_f0(units, spk, cfg, g, rng))
            corpus.append(neutral)
            for ei, (emo, spec) in enumerate(sorted(cfg.emotions.items())):
                corpus.append(apply_emotion_transform(
                    neutral, spec, speaker=spk, seed=[seed, 2, gi, si, ei], emotion=emo,
                    content_units=cfg.content_units, vocab_size=cfg.vocab_size))
    return corpus


def _resample_run(values: np.ndarray, n: int) -> np.ndarray:
    if len(values) == n:
        return values.copy()
    if np.all(values == 0):
        return np.zeros(n)
    src = np.linspace(0.0, 1.0, len(values)) if len(values) > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return np.interp(dst, src, values)


def apply_emotion_transform(u: Utterance, spec: EmotionTransformSpec, speaker: SpeakerSpec,
                            seed, emotion: str = "amused", content_units: int = 48,
                            vocab_size: int = 64) -> Utterance:
    """Render a neutral utterance in another emotion.

    Content units are kept; run durations are scaled (round half up, at least
    one frame), motifs are inserted at word boundaries, and voiced F0 is
    shifted and scaled in the speaker-normalised domain.
    """
    if u.emotion != "neutral":
        raise CorpusError(f"{u.id}: transform source must be neutral, got {u.emotion}")
    check_transform(spec, content_units, vocab_size)
    rng = np.random.default_rng(seed)
    runs, durs = dedup(u.units)
    f0 = np.asarray(u.f0)
    # per-run F0 segments
    bounds = np.concatenate([[0], np.cumsum(durs)])
    segments = [f0[bounds[i]:bounds[i + 1]] for i in range(len(runs))]
    new_durs = [max(1, int(round_half_up(d * spec.duration_scale))) for d in durs]
    segments = [_resample_run(s, n) for s, n in zip(segments, new_durs)]

    for m in spec.motifs:
        if rng.random() >= m.probability:
            continue
        motif_f0 = speaker.base_hz + speaker.sigma_hz * (
            m.pitch_offset + rng.uniform(-0.05, 0.05, m.frames_per_unit * len(m.units)))
        motif_runs = list(m.units)
        motif_segs = [motif_f0[i * m.frames_per_unit:(i + 1) * m.frames_per_unit]
                      for i in range(len(m.units))]
        if m.position == "end":
            at = len(runs) - 1 if runs and runs[-1] == SEPARATOR else len(runs)
        else:
            at = 1 if runs and runs[0] == SEPARATOR else 0
        runs = runs[:at] + motif_runs + runs[at:]
        new_durs = new_durs[:at] + [m.frames_per_unit] * len(m.units) + new_durs[at:]
        segments = segments[:at] + motif_segs + segments[at:]

    units = inflate(runs, new_durs)
    out_f0 = np.concatenate(segments) if segments else np.zeros(0)
    voiced = out_f0 > 0
    z = (out_f0 - speaker.base_hz) / speaker.sigma_hz
    z = z * math.sqrt(spec.f0_variance_scale) + spec.f0_shift
    out_f0 = np.where(voiced, np.maximum(speaker.base_hz + speaker.sigma_hz * z, 1.0), 0.0)
    return Utterance(u.id.replace("_neutral", f"_{emotion}") if u.id.endswith("_neutral")
                     else f"{u.id}_{emotion}", u.speaker, emotion, u.transcript_group, units, out_f0)


# -- pairing and splitting -------------------------------------------------

def make_parallel_pairs(corpus: Iterable[Utterance]) -> list[ParallelPair]:
    groups: dict[str, list[Utterance]] = {}
    for u in corpus:
        groups.setdefault(u.transcript_group, []).append(u)
    pairs = []
    for key in sorted(groups):
        members = groups[key]
        for a in members:
            for b in members:
                if a is not b and a.emotion != b.emotion:
                    pairs.append(ParallelPair(a, b))
    return pairs


def split_counts(n_groups: int, ratios: Sequence[float]) -> list[int]:
    """Floor plus largest-remainder allocation, each split kept non-empty."""
    raw = [r * n_groups for r in ratios]
    counts = [int(math.floor(x + 1e-9)) for x in raw]
    rema = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in rema[:n_groups - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        while counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_by_transcript(pairs: Sequence[ParallelPair], ratios=(0.90, 0.05, 0.05), seed: int = 0):
    """Partition pairs into train/valid/test so no transcript group crosses splits."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise CorpusError(f"ratios must be three values summing to 1, got {ratios}")
    groups = sorted({p.source.transcript_group for p in pairs})
    if len(groups) < 3:
        raise CorpusError(f"need at least 3 transcript groups to split, got {len(groups)}")
    order = np.random.default_rng(seed).permutation(len(groups))
    counts = split_counts(len(groups), ratios)
    assignment = {}
    start = 0
    for split, n in enumerate(counts):
        for gi in order[start:start + n]:
            assignment[groups[gi]] = split
        start += n
    out = ([], [], [])
    for p in pairs:
        out[assignment[p.source.transcript_group]].append(p)
    return out


def split_groups(corpus: Sequence[Utterance], ratios=(0.90, 0.05, 0.05), seed: int = 0):
    """Same partition as :func:`split_by_transcript`, applied to utterances."""
    groups = sorted({u.transcript_group for u in corpus})
    if len(groups) < 3:
        raise CorpusError(f"need at least 3 transcript groups to split, got {len(groups)}")
    order = np.random.default_rng(seed).permutation(len(groups))
    counts = split_counts(len(groups), ratios)
    sets, start = [], 0
    for n in counts:
        sets.append({groups[i] for i in order[start:start + n]})
        start += n
    return tuple([u for u in corpus if u.transcript_group in s] for s in sets)


# -- manifests ---------------------------------------------------------------

class UtteranceList(list):
    """List of utterances that also carries load-time warnings."""

    def __init__(self, items=(), warnings=None):
        super().__init__(items)
        self.warnings: list[str] = list(warnings or [])


def read_f0(path) -> np.ndarray:
    vals = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line))
            except ValueError:
                raise CorpusError(f"{path}:{ln}: not a number: {line!r}") from None
    return np.asarray(vals, dtype=np.float64)


def write_f0(path, f0: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in f0:
            fh.write(("0" if v == 0 else repr(float(v))) + "\n")


def load_manifest(path, vocab_size: int | None = None) -> UtteranceList:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    out = UtteranceList()
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = [f.strip() for f in line.split("\t")]
            if len(fields) != 6:
                raise CorpusError(f"{path}:{ln}: expected 6 tab-separated fields, got {len(fields)}")
            utt_id, speaker, emotion, group, units_path, f0_path = fields
            if emotion not in EMOTIONS:
                raise CorpusError(f"{path}:{ln}: unknown emotion {emotion!r}")
            try:
                spk = int(speaker)
            except ValueError:
                raise CorpusError(f"{path}:{ln}: speaker must be an integer, got {speaker!r}") from None
            units = read_units(base / units_path, vocab_size)
            f0 = read_f0(base / f0_path)
            if len(units) != len(f0):
                n = min(len(units), len(f0))
                msg = f"{utt_id}: {len(units)} unit frames vs {len(f0)} F0 frames, truncated to {n}"
                log.warning(msg)
                out.warnings.append(msg)
                units, f0 = units[:n], f0[:n]
            out.append(Utterance(utt_id, spk, emotion, group, units, f0))
    return out


def write_manifest(path, utterances: Sequence[Utterance], data_dir: str | None = None) -> None:
    """Write utterances plus their unit/F0 files; paths in the manifest are relative."""
    path = Path(path)
    data_dir = Path(data_dir) if data_dir else path.parent / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# utt_id\tspeaker\temotion\ttranscript_group\tunits_path\tf0_path"]
    for u in utterances:
        up = data_dir / f"{u.id}.units"
        fp = data_dir / f"{u.id}.f0"
        write_units(up, u.units)
        write_f0(fp, u.f0)
        lines.append("\t".join([u.id, str(u.speaker), u.emotion, u.transcript_group,
                                os.path.relpath(up, path.parent), os.path.relpath(fp, path.parent)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def with_units(u: Utterance, units, f0, emotion=None, uid=None) -> Utterance:
    return replace(u, units=tuple(units), f0=np.asarray(f0), emotion=emotion or u.emotion,
                   id=uid or u.id)
