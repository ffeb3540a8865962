"""Discrete unit sequences, the run-length dedup/inflate codec and unit file I/O.

Every unit stands for one 20 ms frame.  Durations are kept as integer frame
counts throughout.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FRAME_MS = 20
SPECIAL_SYMBOLS = ("PAD", "BOS", "EOS", "MASK")


class UnitFormatError(ValueError):
    """Raised when a unit file or unit sequence is malformed."""


@dataclass(frozen=True)
class UnitVocab:
    """Content vocabulary of size ``size`` plus special and emotion tokens.

    Special ids are allocated right after the content range, in the order
    PAD, BOS, EOS, MASK, then one token per emotion.
    """

    size: int
    emotions: tuple[str, ...] = ()
    reserved: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("vocabulary size must be positive")
        if len(set(self.emotions)) != len(self.emotions):
            raise ValueError("duplicate emotion in vocabulary")
        table = {name: self.size + i for i, name in enumerate(SPECIAL_SYMBOLS)}
        for j, emo in enumerate(self.emotions):
            table[f"<{emo}>"] = self.size + len(SPECIAL_SYMBOLS) + j
        object.__setattr__(self, "reserved", table)

    @property
    def pad(self) -> int:
        return self.reserved["PAD"]

    @property
    def bos(self) -> int:
        return self.reserved["BOS"]

    @property
    def eos(self) -> int:
        return self.reserved["EOS"]

    @property
    def mask(self) -> int:
        return self.reserved["MASK"]

    def emotion_token(self, emotion: str) -> int:
        try:
            return self.reserved[f"<{emotion}>"]
        except KeyError:
            raise KeyError(f"no token for emotion {emotion!r}") from None

    @property
    def total(self) -> int:
        """Size of the full embedding table (content + specials + emotions)."""
        return self.size + len(SPECIAL_SYMBOLS) + len(self.emotions)

    def is_content(self, unit: int) -> bool:
        return 0 <= unit < self.size


def _as_int_list(seq: Iterable[int]) -> list[int]:
    return [int(u) for u in seq]


def dedup(seq: Sequence[int]) -> tuple[list[int], list[int]]:
    """Collapse adjacent repeats: ``[0,0,0,1,1,2] -> ([0,1,2], [3,2,1])``."""
    units: list[int] = []
    durations: list[int] = []
    for u in _as_int_list(seq):
        if units and units[-1] == u:
            durations[-1] += 1
        else:
            units.append(u)
            durations.append(1)
    return units, durations


def inflate(units: Sequence[int], durations: Sequence[int]) -> list[int]:
    """Expand ``(unit, duration)`` runs back to frame rate."""
    if len(units) != len(durations):
        raise ValueError(
            f"length mismatch: {len(units)} units vs {len(durations)} durations")
    out: list[int] = []
    for u, d in zip(units, durations):
        d = int(d)
        if d < 1:
            raise ValueError(f"duration must be >= 1, got {d}")
        out.extend([int(u)] * d)
    return out


def collapse(seq: Sequence[int]) -> list[int]:
    """Deduped units only, durations dropped."""
    return dedup(seq)[0]


def check_units(seq: Sequence[int], vocab_size: int | None = None) -> None:
    for i, u in enumerate(seq):
        if u < 0:
            raise UnitFormatError(f"negative unit id {u} at position {i}")
        if vocab_size is not None and u >= vocab_size:
            raise UnitFormatError(
                f"unit id {u} at position {i} outside vocabulary of size {vocab_size}")


def parse_units(text: str, vocab_size: int | None = None, source: str = "<string>") -> list[int]:
    units = []
    for i, tok in enumerate(text.split(), start=1):
        try:
            value = int(tok, 10)
        except ValueError:
            raise UnitFormatError(f"{source}: non-integer token {tok!r} at token {i}") from None
        if value < 0:
            raise UnitFormatError(f"{source}: negative unit id {value} at token {i}")
        units.append(value)
    check_units(units, vocab_size)
    return units


def read_units(path: str | os.PathLike, vocab_size: int | None = None) -> list[int]:
    """Read a whitespace-separated unit file."""
    with open(path, encoding="utf-8") as fh:
        return parse_units(fh.read(), vocab_size, source=str(path))


def format_units(seq: Sequence[int]) -> str:
    return " ".join(str(int(u)) for u in seq) + "\n"


def write_units(path: str | os.PathLike, seq: Sequence[int]) -> None:
    check_units(_as_int_list(seq))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_units(seq))


def durations_to_ms(durations: Sequence[int]) -> np.ndarray:
    return np.asarray(durations, dtype=np.int64) * FRAME_MS
