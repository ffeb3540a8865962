"""Frame-level F0 predictor conditioned on the target emotion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import nn
from ..nn import ops
from ..training import EarlyStopper, TrainConfig, batches, split_valid
from .bins import (BinError, BinSpec, decode_f0, encode_f0_targets, f0_mae_voiced,
                   normalize_f0)


class F0Net(nn.Module):
    """Six same-padded conv layers over unit + emotion embeddings, sigmoid bin head and voicing head."""

    def __init__(self, vocab_size: int, n_emotions: int, d: int = 50, channels: int = 64,
                 kernel: int = 7, layers: int = 6, emb: int = 64, emo_dim: int = 16,
                 dropout: float = 0.1, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.hparams = dict(vocab_size=vocab_size, n_emotions=n_emotions, d=d, channels=channels,
                            kernel=kernel, layers=layers, emb=emb, emo_dim=emo_dim,
                            dropout=dropout, seed=seed)
        self.pad = vocab_size
        self.embed = nn.Embedding(vocab_size + 1, emb, rng)
        self.emotion = nn.Embedding(n_emotions, emo_dim, rng)
        self.convs = []
        c_in = emb + emo_dim
        for i in range(layers):
            self.convs.append(self.add_module(f"conv{i}", nn.Conv1d(c_in, channels, kernel, rng)))
            c_in = channels
        self.drop = nn.Dropout(dropout, np.random.default_rng([seed, 1]))
        self.bins_head = nn.Linear(channels, d, rng)
        self.voice_head = nn.Linear(channels, 1, rng)

    def forward(self, ids: np.ndarray, emotions: np.ndarray):
        B, T = ids.shape
        mask = (ids != self.pad)[..., None].astype(self.embed.weight.dtype)
        e = self.emotion(np.asarray(emotions)).reshape(B, 1, -1)
        e = e + nn.Tensor(np.zeros((B, T, e.shape[-1]), dtype=mask.dtype))
        h = ops.concat([self.embed(ids), e], axis=-1) * mask
        for conv in self.convs:
            h = self.drop(ops.relu(conv(h))) * mask
        return self.bins_head(h), self.voice_head(h).reshape(B, T)


@dataclass
class F0Example:
    units: tuple
    emotion: str
    speaker: int
    f0_hz: np.ndarray
    targets: np.ndarray
    voicing: np.ndarray
    bins: BinSpec


def encode_example(utt, bins: BinSpec, blur_sigma_bins: float = 1.0) -> F0Example:
    stats = bins.stats_for(utt.speaker)
    f0 = np.asarray(utt.f0, dtype=np.float64)
    norm = normalize_f0(f0, stats, bins.normalization)
    targets, voicing, _ = encode_f0_targets(norm, f0 > 0, bins, blur_sigma_bins)
    return F0Example(tuple(utt.units), utt.emotion, utt.speaker, f0, targets, voicing, bins)


class F0Model:
    def __init__(self, net: F0Net, bins: BinSpec, emotions: Sequence[str]):
        self.net = net
        self.bins = bins
        self.emotions = tuple(emotions)

    def emotion_id(self, emotion: str) -> int:
        try:
            return self.emotions.index(emotion)
        except ValueError:
            raise BinError(f"F0 model has no emotion {emotion!r}") from None

    def activations(self, unit_batch, emotions) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-item ``(bin activations (T, d), voicing probability (T,))``."""
        if not unit_batch:
            return []
        ids = _pad(unit_batch, self.net.pad)
        emo = np.array([self.emotion_id(e) for e in emotions])
        self.net.eval()
        with nn.no_grad():
            logits, vlogits = self.net(ids, emo)
        acts = ops._stable_sigmoid(logits.data.astype(np.float64))
        voice = ops._stable_sigmoid(vlogits.data.astype(np.float64))
        return [(acts[b, :len(u)], voice[b, :len(u)]) for b, u in enumerate(unit_batch)]

    def predict(self, units, emotion: str, speaker: int, rule: str = "weighted_average") -> np.ndarray:
        if not len(units):
            return np.zeros(0)
        (acts, voice), = self.activations([units], [emotion])
        return decode_f0(acts, self.bins, rule, voice, self.bins.stats_for(speaker))

    def predict_many(self, items, rule: str = "weighted_average", batch_size: int = 32):
        """``items``: sequence of ``(units, emotion, speaker)``."""
        out = []
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            for (units, _, spk), (acts, voice) in zip(
                    chunk, self.activations([c[0] for c in chunk], [c[1] for c in chunk])):
                out.append(decode_f0(acts, self.bins, rule, voice, self.bins.stats_for(spk)))
        return out

    def header(self) -> dict:
        return {**self.net.hparams, "emotions": list(self.emotions), "bins": self.bins.to_dict()}


def _pad(seqs, pad: int) -> np.ndarray:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids


def f0_loss(net: F0Net, batch: Sequence[F0Example], emotions: Sequence[str]):
    """Per-frame sum of bin BCEs plus voicing BCE, averaged over real frames."""
    ids = _pad([ex.units for ex in batch], net.pad)
    B, T = ids.shape
    d = net.hparams["d"]
    tgt = np.zeros((B, T, d))
    voice = np.zeros((B, T))
    for b, ex in enumerate(batch):
        tgt[b, :len(ex.units)] = ex.targets
        voice[b, :len(ex.units)] = ex.voicing
    valid = (ids != net.pad).astype(np.float64)
    n = valid.sum()
    emo = np.array([emotions.index(ex.emotion) for ex in batch])
    logits, vlogits = net(ids, emo)
    loss = ops.bce_with_logits(logits, tgt, valid[..., None] / n)
    return loss + ops.bce_with_logits(vlogits, voice, valid / n)


def validation_mae(model: F0Model, examples: Sequence[F0Example], rule="weighted_average") -> float:
    preds = model.predict_many([(ex.units, ex.emotion, ex.speaker) for ex in examples], rule)
    return f0_mae_voiced(np.concatenate(preds), np.concatenate([ex.f0_hz for ex in examples]))


def train_f0(examples: Sequence[F0Example], bins: BinSpec, emotions: Sequence[str],
             cfg: TrainConfig | None = None, valid: Sequence[F0Example] | None = None,
             log=None, **arch) -> F0Model:
    """Minimise the BCE objective; early-stop on validation voiced-frame MAE (Hz)."""
    cfg = cfg or TrainConfig()
    examples = list(examples)
    if not examples:
        raise BinError("no F0 training data")
    for ex in list(examples) + list(valid or []):
        if ex.bins != bins:
            raise BinError("all F0 examples must be encoded with the model's BinSpec")
    if valid is None:
        examples, valid = split_valid(examples, cfg.seed)
    emotions = tuple(emotions)
    vocab = arch.pop("vocab_size", None) or 1 + max(max(ex.units) for ex in examples)
    net = F0Net(vocab, len(emotions), d=bins.d, seed=cfg.seed, **arch)
    model = F0Model(net, bins, emotions)
    opt = nn.Adam(net.named_parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    stopper = EarlyStopper(cfg.patience)
    rng = np.random.default_rng([cfg.seed, 11])
    step = 0
    for idx in batches(len(examples), cfg.batch_size, rng, cfg.max_steps):
        net.train()
        opt.zero_grad()
        loss = f0_loss(net, [examples[i] for i in idx], emotions)
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.eval_every == 0:
            mae = validation_mae(model, valid)
            if log:
                log(f"f0 step {step} loss {loss.item():.4f} valid_mae_hz {mae:.3f}")
            if stopper.update(mae, net.state_dict()):
                break
    if stopper.best_state is not None:
        net.load_state_dict(stopper.best_state)
    net.eval()
    return model
