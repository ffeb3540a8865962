"""Shared training-loop plumbing: config, batching, early stopping."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 100
    patience: int = 5
    seed: int = 0
    clip_norm: float = 1.0

    def to_dict(self):
        return asdict(self)


def batches(n: int, batch_size: int, rng: np.random.Generator, max_steps: int):
    """Shuffled minibatch indices, epoch after epoch, for ``max_steps`` steps."""
    if n == 0:
        return
    step = 0
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            if step >= max_steps:
                return
            yield order[i:i + batch_size]
            step += 1


def split_valid(items: list, seed: int, fraction: float = 0.1):
    """Deterministic hold-out of ``fraction`` of ``items`` (at least one)."""
    if len(items) < 2:
        return list(items), list(items)
    order = np.random.default_rng([seed, 99]).permutation(len(items))
    n_valid = max(1, int(round(len(items) * fraction)))
    valid = [items[i] for i in sorted(order[:n_valid])]
    train = [items[i] for i in sorted(order[n_valid:])]
    return train, valid


class EarlyStopper:
    """Tracks the best (lowest) validation metric and its parameters."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_state = None
        self.bad = 0
        self.history: list[float] = []

    def update(self, metric: float, state) -> bool:
        self.history.append(float(metric))
        if metric < self.best - self.min_delta:
            self.best = float(metric)
            self.best_state = state
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience
