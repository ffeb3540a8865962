"""Pipeline configuration: one TOML file with corpus, model, training and path sections."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import EMOTIONS, CorpusConfig, SpeakerSpec, default_transforms
from .prosody.bins import DECODE_RULES, NORMALIZATIONS, STRATEGIES
from .training import TrainConfig
from .translator import SCHEMES, NoiseConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    n_transcripts: int = 500
    vocab_size: int = 64
    content_units: int = 48
    emotions: tuple = ("amused",)
    speakers: tuple = ((110.0, 15.0), (210.0, 25.0))
    motif_probability: float | None = None     # override for every motif
    split: tuple = (0.9, 0.05, 0.05)


@dataclass
class TranslatorSection:
    scheme: str = "share_enc"
    d_model: int = 64
    ffn: int = 128
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    beam: int = 1
    pretrain: bool = False
    infill_poisson_lambda: float = 3.5
    infill_p: float = 0.1
    token_mask_p: float = 0.3
    random_mask_p: float = 0.1
    sentence_permutation: bool = False


@dataclass
class DurationSection:
    variant: str = "cnn"
    n: int = 5


@dataclass
class F0Section:
    strategy: str = "adaptive"
    normalization: str = "mean_std"
    decode_rule: str = "weighted_average"
    d: int = 50
    blur_sigma: float = 1.0
    channels: int = 64
    layers: int = 6
    kernel: int = 7


@dataclass
class TrainingSection:
    lr: float = 2e-3
    batch_size: int = 32
    patience: int = 5
    eval_every: int = 100
    translator_steps: int = 1500
    pretrain_steps: int = 2000
    duration_steps: int = 1500
    f0_steps: int = 600
    f0_batch_size: int = 16
    max_pairs: int = 0          # cap on translation training pairs; 0 = all


@dataclass
class PathsSection:
    corpus: str = "corpus"
    models: str = "models"
    output: str = "out"


SECTIONS = {"corpus": CorpusSection, "translator": TranslatorSection, "duration": DurationSection,
            "f0": F0Section, "training": TrainingSection, "paths": PathsSection}


@dataclass
class PipelineConfig:
    seed: int
    corpus: CorpusSection = field(default_factory=CorpusSection)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    duration: DurationSection = field(default_factory=DurationSection)
    f0: F0Section = field(default_factory=F0Section)
    training: TrainingSection = field(default_factory=TrainingSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default=Path("."), compare=False)

    # -- derived views -------------------------------------------------------
    @property
    def emotions(self) -> tuple:
        """All emotions handled by the models, neutral first."""
        return ("neutral",) + tuple(e for e in sorted(self.corpus.emotions) if e != "neutral")

    def corpus_config(self) -> CorpusConfig:
        c = self.corpus
        transforms = default_transforms(c.content_units)
        chosen = {}
        for e in c.emotions:
            spec = transforms[e]
            if c.motif_probability is not None:
                spec = replace(spec, motifs=tuple(replace(m, probability=c.motif_probability)
                                                  for m in spec.motifs))
            chosen[e] = spec
        return CorpusConfig(n_transcripts=c.n_transcripts, content_units=c.content_units,
                            vocab_size=c.vocab_size,
                            speakers=tuple(SpeakerSpec(float(a), float(b)) for a, b in c.speakers),
                            emotions=chosen)

    def noise_config(self) -> NoiseConfig:
        t = self.translator
        return NoiseConfig(infill_poisson_lambda=t.infill_poisson_lambda, infill_p=t.infill_p,
                           token_mask_p=t.token_mask_p, random_mask_p=t.random_mask_p,
                           sentence_permutation=t.sentence_permutation)

    def train_config(self, stage: str) -> TrainConfig:
        tr = self.training
        steps = {"translator": tr.translator_steps, "pretrain": tr.pretrain_steps,
                 "duration": tr.duration_steps, "f0": tr.f0_steps}[stage]
        return TrainConfig(lr=tr.lr, batch_size=tr.f0_batch_size if stage == "f0" else tr.batch_size,
                           max_steps=steps, eval_every=tr.eval_every, patience=tr.patience,
                           seed=self.seed)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    # -- identity ------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        out["corpus"]["speakers"] = [list(s) for s in self.corpus.speakers]
        return out

    def hash(self) -> str:
        """Digest of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=int(seed))

    def validate(self) -> "PipelineConfig":
        c = self.corpus
        if not c.emotions:
            raise ConfigError("corpus.emotions is empty")
        for e in c.emotions:
            if e not in EMOTIONS or e == "neutral":
                raise ConfigError(f"corpus.emotions: unknown or neutral emotion {e!r}")
        if len(set(c.emotions)) != len(c.emotions):
            raise ConfigError("corpus.emotions has duplicates")
        if c.motif_probability is not None and not 0 <= c.motif_probability <= 1:
            raise ConfigError("corpus.motif_probability must be in [0, 1]")
        if self.translator.scheme not in SCHEMES:
            raise ConfigError(f"translator.scheme must be one of {SCHEMES}")
        if self.translator.d_model % self.translator.heads:
            raise ConfigError("translator.d_model must be divisible by translator.heads")
        if self.duration.variant not in ("cnn", "ngram"):
            raise ConfigError("duration.variant must be 'cnn' or 'ngram'")
        if self.duration.n < 1:
            raise ConfigError("duration.n must be >= 1")
        if self.f0.strategy not in STRATEGIES:
            raise ConfigError(f"f0.strategy must be one of {STRATEGIES}")
        if self.f0.normalization not in NORMALIZATIONS:
            raise ConfigError(f"f0.normalization must be one of {NORMALIZATIONS}")
        if self.f0.decode_rule not in DECODE_RULES:
            raise ConfigError(f"f0.decode_rule must be one of {DECODE_RULES}")
        for f in fields(TrainingSection):
            if f.name != "max_pairs" and getattr(self.training, f.name) <= 0:
                raise ConfigError(f"training.{f.name} must be positive")
        if self.training.max_pairs < 0:
            raise ConfigError("training.max_pairs must be >= 0")
        try:
            self.corpus_config().validate()
            self.noise_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def _section(cls, raw: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    vals = {}
    for k, v in raw.items():
        default = known[k].default
        if isinstance(default, tuple) or isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        elif isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"[{name}] {k} must be true or false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"[{name}] {k} must be a number")
            if isinstance(default, int) and not float(v).is_integer():
                raise ConfigError(f"[{name}] {k} must be an integer")
            v = type(default)(v)
        vals[k] = v
    return cls(**vals)


def from_dict(raw: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    raw = dict(raw)
    if "seed" not in raw:
        raise ConfigError("config must set a top-level 'seed'")
    seed = raw.pop("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    parts = {name: _section(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    return PipelineConfig(seed=seed, base_dir=base_dir, **parts).validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, path.parent)


def dump_config(cfg: PipelineConfig) -> str:
    """TOML text that loads back to an equal config."""
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    d = cfg.to_dict()
    lines = [f"seed = {d.pop('seed')}"]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        for k, v in d[name].items():
            if v is not None:
                lines.append(f"{k} = {val(v)}")
    return "\n".join(lines) + "\n"
