"""Duration predictors: a small CNN trained with MSE, and n-gram tables with back-off."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import nn
from ..nn import ops
from ..corpus import round_half_up
from ..training import TrainConfig, batches, split_valid, EarlyStopper
from ..units import FRAME_MS

BOS = -1


class DurationError(ValueError):
    pass


# -- n-gram ------------------------------------------------------------------

class NgramDurationModel:
    """Mean/std duration per n-gram ending at the predicted unit.

    Unseen contexts back off to shorter suffixes, then to the global statistic.
    Standard deviations are the population std of the observed durations.
    """

    variant = "ngram"

    def __init__(self, n: int):
        if n < 1:
            raise DurationError("n must be >= 1")
        self.n = n
        self.tables: list[dict] = []
        self.global_stat: tuple[float, float] | None = None

    @staticmethod
    def _key(units: Sequence[int], i: int, k: int) -> tuple:
        return tuple(units[j] if j >= 0 else BOS for j in range(i - k + 1, i + 1))

    def fit(self, data) -> "NgramDurationModel":
        if not data:
            raise DurationError("no training data")
        acc = [dict() for _ in range(self.n)]
        everything = []
        for units, durs in data:
            if len(units) != len(durs):
                raise DurationError("units/durations length mismatch")
            for i, d in enumerate(durs):
                everything.append(d)
                for k in range(1, self.n + 1):
                    acc[k - 1].setdefault(self._key(units, i, k), []).append(d)
        if not everything:
            raise DurationError("no training data")
        self.tables = [
            {key: (max(float(np.mean(v)), 1.0), float(np.std(v))) for key, v in table.items()}
            for table in acc
        ]
        self.global_stat = (max(float(np.mean(everything)), 1.0), float(np.std(everything)))
        return self

    def lookup(self, units: Sequence[int], i: int) -> tuple[float, float, int]:
        """``(mu, sigma, order)`` for position ``i``; order 0 means the global statistic."""
        if self.global_stat is None:
            raise DurationError("model is not trained")
        for k in range(self.n, 0, -1):
            hit = self.tables[k - 1].get(self._key(units, i, k))
            if hit is not None:
                return hit[0], hit[1], k
        return self.global_stat[0], self.global_stat[1], 0

    def predict(self, units: Sequence[int], seed=None) -> list[int]:
        if seed is None:
            raise DurationError("n-gram prediction samples and needs a seed")
        rng = np.random.default_rng(seed)
        out = []
        for i in range(len(units)):
            mu, sigma, _ = self.lookup(units, i)
            x = rng.normal(mu, sigma) if sigma > 0 else mu
            out.append(int(max(1, round_half_up(max(x, 1.0)))))
        return out

    def header(self) -> dict:
        return {"variant": "ngram", "n": self.n}

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "global": list(self.global_stat) if self.global_stat else None,
            "tables": [[[list(k), v[0], v[1]] for k, v in sorted(t.items())] for t in self.tables],
        }

    @classmethod
    def from_dict(cls, obj) -> "NgramDurationModel":
        m = cls(int(obj["n"]))
        m.global_stat = tuple(obj["global"]) if obj["global"] is not None else None
        m.tables = [{tuple(k): (mu, sd) for k, mu, sd in t} for t in obj["tables"]]
        return m


# -- CNN ---------------------------------------------------------------------

class DurationCNN(nn.Module):
    def __init__(self, vocab_size: int, emb: int = 64, channels: int = 128, kernel: int = 3,
                 layers: int = 2, dropout: float = 0.1, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.hparams = dict(vocab_size=vocab_size, emb=emb, channels=channels, kernel=kernel,
                            layers=layers, dropout=dropout, seed=seed)
        self.pad = vocab_size
        self.embed = nn.Embedding(vocab_size + 1, emb, rng)
        self.convs, self.norms = [], []
        c_in = emb
        for i in range(layers):
            self.convs.append(self.add_module(f"conv{i}", nn.Conv1d(c_in, channels, kernel, rng)))
            self.norms.append(self.add_module(f"norm{i}", nn.LayerNorm(channels)))
            c_in = channels
        self.drop = nn.Dropout(dropout, np.random.default_rng([seed, 1]))
        self.head = nn.Linear(channels, 1, rng)

    def forward(self, ids: np.ndarray) -> nn.Tensor:
        mask = (ids != self.pad)[..., None].astype(self.embed.weight.dtype)
        h = self.embed(ids) * mask
        for conv, norm in zip(self.convs, self.norms):
            h = self.drop(norm(ops.relu(conv(h)))) * mask
        return self.head(h).reshape(ids.shape)


class CNNDurationModel:
    variant = "cnn"

    def __init__(self, net: DurationCNN):
        self.net = net

    def raw(self, units_batch: list[Sequence[int]]) -> list[np.ndarray]:
        ids = _pad_batch(units_batch, self.net.pad)
        self.net.eval()
        with nn.no_grad():
            out = self.net(ids).data
        return [out[b, :len(u)].astype(np.float64) for b, u in enumerate(units_batch)]

    def predict(self, units: Sequence[int], seed=None) -> list[int]:
        if not len(units):
            return []
        return round_durations(self.raw([units])[0])

    def predict_many(self, batch: list[Sequence[int]]) -> list[list[int]]:
        return [round_durations(r) for r in self.raw(batch)] if batch else []

    def header(self) -> dict:
        return {"variant": "cnn", **self.net.hparams}


def round_durations(raw) -> list[int]:
    """Round half up after clamping at one frame."""
    return [int(x) for x in round_half_up(np.maximum(np.asarray(raw, dtype=np.float64), 1.0))]


def _pad_batch(seqs, pad: int) -> np.ndarray:
    L = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), max(L, 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids


def train_duration_cnn(data, vocab_size: int, cfg: TrainConfig | None = None, valid=None,
                       log=None, **arch) -> CNNDurationModel:
    """Fit the CNN to raw frame durations, early-stopping on validation MAE."""
    cfg = cfg or TrainConfig()
    data = [(list(u), list(d)) for u, d in data if len(u)]
    if not data:
        raise DurationError("no training data")
    if valid is None:
        data, valid = split_valid(data, cfg.seed)
    net = DurationCNN(vocab_size, seed=cfg.seed, dropout=arch.pop("dropout", 0.1), **arch)
    opt = nn.Adam(net.named_parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    model = CNNDurationModel(net)
    stopper = EarlyStopper(cfg.patience)
    rng = np.random.default_rng([cfg.seed, 7])
    step = 0
    for batch in batches(len(data), cfg.batch_size, rng, cfg.max_steps):
        net.train()
        units = [data[i][0] for i in batch]
        ids = _pad_batch(units, net.pad)
        tgt = _pad_batch([data[i][1] for i in batch], 0).astype(np.float32)
        w = (ids != net.pad).astype(np.float32)
        opt.zero_grad()
        loss = ops.mse(net(ids), tgt, w)
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.eval_every == 0:
            pred = model.predict_many([u for u, _ in valid])
            mae = duration_metrics(np.concatenate(pred), np.concatenate([d for _, d in valid]))["mae_frames"]
            if log:
                log(f"duration step {step} loss {loss.item():.4f} valid_mae {mae:.4f}")
            if stopper.update(mae, net.state_dict()):
                break
    if stopper.best_state is not None:
        net.load_state_dict(stopper.best_state)
    net.eval()
    return model


def train_duration_ngram(data, n: int) -> NgramDurationModel:
    return NgramDurationModel(n).fit([(list(u), list(d)) for u, d in data])


def duration_metrics(pred, target) -> dict:
    """MAE in frames and accuracy within 0/20/40 ms."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DurationError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DurationError("no durations to compare")
    err_ms = np.abs(p - t) * FRAME_MS
    return {
        "mae_frames": float(np.abs(p - t).mean()),
        "acc@0ms": float((err_ms <= 0).mean()),
        "acc@20ms": float((err_ms <= 20).mean()),
        "acc@40ms": float((err_ms <= 40).mean()),
    }
