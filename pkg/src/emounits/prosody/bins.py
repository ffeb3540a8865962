"""Speaker statistics, F0 normalisation, binning, soft targets and decoding."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

NORMALIZATIONS = ("none", "mean", "mean_std")
STRATEGIES = ("uniform", "adaptive")
DECODE_RULES = ("argmax", "weighted_average")
SIGMA_FLOOR = 1e-3
ACTIVATION_FLOOR = 1e-4


class BinError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerStats:
    mean: float
    std: float


def fit_speaker_stats(utterances: Iterable) -> dict[int, SpeakerStats]:
    """Per-speaker mean and sample std (ddof=1) of voiced F0, std floored at 1e-3 Hz."""
    pooled: dict[int, list[np.ndarray]] = {}
    for u in utterances:
        f0 = np.asarray(u.f0, dtype=np.float64)
        pooled.setdefault(u.speaker, []).append(f0[f0 > 0])
    stats = {}
    for spk in sorted(pooled):
        v = np.concatenate(pooled[spk])
        if v.size == 0:
            raise BinError(f"speaker {spk} has no voiced frames")
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        stats[spk] = SpeakerStats(float(v.mean()), max(std, SIGMA_FLOOR))
    return stats


def stats_from_values(values) -> SpeakerStats:
    v = np.asarray(values, dtype=np.float64)
    v = v[v > 0]
    if v.size == 0:
        raise BinError("no voiced frames")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return SpeakerStats(float(v.mean()), max(std, SIGMA_FLOOR))


def normalize_f0(f0_hz, stats: SpeakerStats, mode: str) -> np.ndarray:
    """Map voiced frames to the normalised domain; unvoiced zeros are left as zeros."""
    f0 = np.asarray(f0_hz, dtype=np.float64)
    voiced = f0 > 0
    if mode == "none":
        out = f0.copy()
    elif mode == "mean":
        out = f0 - stats.mean
    elif mode == "mean_std":
        out = (f0 - stats.mean) / stats.std
    else:
        raise BinError(f"unknown normalization mode {mode!r}")
    return np.where(voiced, out, 0.0)


def denormalize_f0(values, stats: SpeakerStats, mode: str, voiced=None) -> np.ndarray:
    """Inverse of :func:`normalize_f0`; ``voiced`` marks which frames carry a value."""
    v = np.asarray(values, dtype=np.float64)
    if mode == "none":
        out = v.copy()
    elif mode == "mean":
        out = v + stats.mean
    elif mode == "mean_std":
        out = v * stats.std + stats.mean
    else:
        raise BinError(f"unknown normalization mode {mode!r}")
    if voiced is None:
        return out
    return np.where(np.asarray(voiced, dtype=bool), out, 0.0)


@dataclass
class BinSpec:
    strategy: str
    edges: np.ndarray
    representatives: np.ndarray
    normalization: str = "mean_std"
    speaker_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.representatives = np.asarray(self.representatives, dtype=np.float64)
        if self.strategy not in STRATEGIES:
            raise BinError(f"unknown binning strategy {self.strategy!r}")
        if self.normalization not in NORMALIZATIONS:
            raise BinError(f"unknown normalization mode {self.normalization!r}")
        if self.d < 2:
            raise BinError("need at least 2 bins")
        if len(self.representatives) != self.d:
            raise BinError("one representative per bin required")
        if np.any(np.diff(self.edges) <= 0):
            raise BinError("bin edges must be strictly ascending")

    @property
    def d(self) -> int:
        return len(self.edges) - 1

    def index(self, values) -> np.ndarray:
        """Bin of each value: ``(e_i, e_{i+1}]`` maps to ``i``; out-of-range clamps."""
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=np.float64), side="left") - 1
        return np.clip(idx, 0, self.d - 1)

    def out_of_range(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return (v < self.edges[0]) | (v > self.edges[-1])

    def stats_for(self, speaker: int) -> SpeakerStats:
        if self.normalization == "none":
            return self.speaker_stats.get(speaker, SpeakerStats(0.0, 1.0))
        try:
            return self.speaker_stats[speaker]
        except KeyError:
            raise BinError(f"no F0 statistics for speaker {speaker}") from None

    def half_widths(self) -> np.ndarray:
        return np.diff(self.edges) / 2

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "d": self.d,
            "normalization": self.normalization,
            "edges": [float(x) for x in self.edges],
            "representatives": [float(x) for x in self.representatives],
            "speaker_stats": {str(k): [v.mean, v.std] for k, v in sorted(self.speaker_stats.items())},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "BinSpec":
        stats = {int(k): SpeakerStats(float(v[0]), float(v[1]))
                 for k, v in obj.get("speaker_stats", {}).items()}
        return cls(obj["strategy"], obj["edges"], obj["representatives"], obj["normalization"], stats)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BinSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        return isinstance(other, BinSpec) and self.to_dict() == other.to_dict()


def _strictly_ascending(edges: np.ndarray) -> np.ndarray:
    edges = edges.copy()
    for i in range(1, len(edges)):
        if edges[i] <= edges[i - 1]:
            edges[i] = np.nextafter(edges[i - 1], np.inf)
    return edges


def make_bins(values, strategy: str = "adaptive", d: int = 50, normalization: str = "mean_std",
              speaker_stats: dict | None = None) -> BinSpec:
    """Build bins from normalised voiced training values.

    Uniform bins split ``[min, max]`` into equal widths; adaptive edges sit at
    the empirical ``k/d`` quantiles so every bin holds the same mass.  Each
    representative is the mean of the training values falling in its bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise BinError("cannot build bins from no values")
    if d < 2:
        raise BinError("need at least 2 bins")
    if strategy == "uniform":
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, d + 1)
    elif strategy == "adaptive":
        if np.unique(v).size < d:
            raise BinError(f"adaptive binning needs >= {d} distinct values, got {np.unique(v).size}")
        edges = _strictly_ascending(np.quantile(v, np.linspace(0.0, 1.0, d + 1)))
    else:
        raise BinError(f"unknown binning strategy {strategy!r}")
    provisional = BinSpec(strategy, edges, (edges[:-1] + edges[1:]) / 2, normalization,
                          dict(speaker_stats or {}))
    idx = provisional.index(v)
    sums = np.bincount(idx, weights=v, minlength=d)
    counts = np.bincount(idx, minlength=d)
    reps = np.where(counts > 0, sums / np.maximum(counts, 1), provisional.representatives)
    reps = np.clip(reps, edges[:-1], edges[1:])
    return BinSpec(strategy, edges, reps, normalization, dict(speaker_stats or {}))


def gaussian_row(center: int, d: int, sigma: float) -> np.ndarray:
    row = np.zeros(d)
    if sigma <= 1e-6:
        row[center] = 1.0
        return row
    j = np.arange(d)
    dist = np.abs(j - center)
    row = np.exp(-0.5 * (dist / sigma) ** 2)
    row[dist > 3 * sigma] = 0.0
    return row / row.max()


def encode_f0_targets(values_normalized, voiced, bins: BinSpec, blur_sigma_bins: float = 1.0):
    """Blurred one-hot targets per frame.

    Returns ``(targets (T, d), voicing (T,), n_clamped)``.  Unvoiced frames get
    an all-zero row and voicing target 0.
    """
    v = np.asarray(values_normalized, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    T, d = len(v), bins.d
    targets = np.zeros((T, d))
    idx = bins.index(v)
    n_clamped = int((bins.out_of_range(v) & voiced).sum())
    for t in np.flatnonzero(voiced):
        targets[t] = gaussian_row(int(idx[t]), d, blur_sigma_bins)
    return targets, voiced.astype(np.float64), n_clamped


def decode_normalized(activations, bins: BinSpec, rule: str = "weighted_average") -> np.ndarray:
    """Per-frame value in the normalised domain (voicing not applied)."""
    a = np.asarray(activations, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise BinError("activations must be finite")
    reps = bins.representatives
    arg = reps[np.argmax(a, axis=-1)]
    if rule == "argmax":
        return arg
    if rule != "weighted_average":
        raise BinError(f"unknown decode rule {rule!r}")
    w = np.where(a >= ACTIVATION_FLOOR, a, 0.0)
    total = w.sum(axis=-1)
    wavg = (w * reps).sum(axis=-1) / np.where(total > 0, total, 1.0)
    return np.where(total > 0, wavg, arg)


def decode_f0(activations, bins: BinSpec, rule: str = "weighted_average", voicing=None,
              stats: SpeakerStats | None = None) -> np.ndarray:
    """Activations ``(T, d)`` to an F0 track in Hz; frames with voicing < 0.5 become 0."""
    values = decode_normalized(activations, bins, rule)
    if stats is None:
        stats = SpeakerStats(0.0, 1.0)
    hz = denormalize_f0(values, stats, bins.normalization)
    hz = np.maximum(hz, 0.0)
    if voicing is None:
        return hz
    return np.where(np.asarray(voicing) >= 0.5, hz, 0.0)


def f0_mae_voiced(pred_hz, target_hz) -> float:
    """Mean absolute error over frames where the target is voiced."""
    p = np.asarray(pred_hz, dtype=np.float64)
    t = np.asarray(target_hz, dtype=np.float64)
    if p.shape != t.shape:
        raise BinError(f"length mismatch: {p.shape} vs {t.shape}")
    voiced = t > 0
    if not voiced.any():
        raise BinError("no voiced frames in target")
    return float(np.abs(p[voiced] - t[voiced]).mean())
