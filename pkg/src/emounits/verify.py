"""Finite-difference gradient checks for every layer kind and the three full models."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .nn import ops

GRAD_TOLERANCE = 1e-4


def _x(rng, *shape):
    return nn.Tensor(rng.normal(size=shape), requires_grad=True)


def _layer_case(kind: str, rng: np.random.Generator):
    if kind == "embedding":
        layer = nn.Embedding(10, 4, rng)
        ids = np.array([[1, 3, 3, 9]])
        w = rng.normal(size=(1, 4, 4))
        return lambda: (layer(ids) * w).sum(), layer.parameters()
    if kind == "linear":
        layer, x = nn.Linear(4, 3, rng), _x(rng, 2, 4)
        w = rng.normal(size=(2, 3))
        return lambda: (layer(x) * w).sum(), layer.parameters() + [x]
    if kind == "conv1d":
        layer, x = nn.Conv1d(3, 4, 3, rng), _x(rng, 2, 6, 3)
        w = rng.normal(size=(2, 6, 4))
        return lambda: (layer(x) * w).sum(), layer.parameters() + [x]
    if kind == "layer_norm":
        layer, x = nn.LayerNorm(5), _x(rng, 3, 5)
        layer.gain.data = rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        return lambda: (layer(x) * w).sum(), layer.parameters() + [x]
    if kind == "attention":
        layer = nn.MultiHeadAttention(8, 2, rng)
        q, k = _x(rng, 2, 3, 8), _x(rng, 2, 4, 8)
        mask = nn.padding_mask(np.array([[1, 1, 0, 0], [1, 1, 1, 0]]), 0)
        w = rng.normal(size=(2, 3, 8))
        return lambda: (layer(q, k, mask) * w).sum(), layer.parameters() + [q, k]
    if kind == "feed_forward":
        layer, x = nn.FeedForward(4, 6, rng), _x(rng, 2, 3, 4)
        w = rng.normal(size=(2, 3, 4))
        return lambda: (layer(x) * w).sum(), layer.parameters() + [x]
    if kind in ("sigmoid", "relu", "softmax", "log_softmax", "tanh"):
        x = _x(rng, 3, 4)
        f = {"sigmoid": ops.sigmoid, "relu": ops.relu, "softmax": ops.softmax,
             "log_softmax": ops.log_softmax, "tanh": ops.tanh}[kind]
        w = rng.normal(size=(3, 4))
        return lambda: (f(x) * w).sum(), [x]
    if kind == "cross_entropy":
        x = _x(rng, 2, 3, 6)
        t = np.array([[0, 5, 2], [1, 1, 4]])
        return lambda: ops.cross_entropy(x, t, ignore_index=4), [x]
    if kind == "bce":
        x = _x(rng, 4, 5)
        t = rng.uniform(size=(4, 5))
        return lambda: ops.bce_with_logits(x, t), [x]
    if kind == "mse":
        x = _x(rng, 4, 5)
        t = rng.normal(size=(4, 5))
        return lambda: ops.mse(x, t), [x]
    raise KeyError(kind)


LAYER_KINDS = ("embedding", "linear", "conv1d", "layer_norm", "attention", "feed_forward",
               "sigmoid", "relu", "tanh", "softmax", "log_softmax", "cross_entropy", "bce", "mse")


def _translator_case(rng):
    from .translator import Translator, TranslatorConfig, seq_ce_loss
    model = Translator(TranslatorConfig(scheme="share_enc", emotions=("neutral", "amused"),
                                        vocab_size=12, d_model=8, ffn=12, layers=1, heads=2,
                                        dropout=0.0, seed=int(rng.integers(1 << 30)))).eval()
    v = model.vocab
    src = np.array([[3, 5, 7, v.eos], [2, 9, v.eos, v.pad]])
    dec_in = np.array([[v.bos, 4, 6], [v.bos, 1, v.pad]])
    dec_out = np.array([[4, 6, v.eos], [1, v.eos, v.pad]])
    return (lambda: seq_ce_loss(model(src, dec_in, "shared", "amused"), dec_out, v.pad),
            model.parameters())


def _f0_case(rng):
    from .prosody.f0 import F0Net
    net = F0Net(vocab_size=9, n_emotions=2, d=5, channels=4, kernel=3, layers=2, emb=4,
                emo_dim=2, dropout=0.0, seed=int(rng.integers(1 << 30))).eval()
    ids = np.array([[1, 2, 2, 8, 9], [3, 3, 4, 9, 9]])
    emo = np.array([0, 1])
    tgt = rng.uniform(size=(2, 5, 5))
    voice = (rng.uniform(size=(2, 5)) > 0.5).astype(float)
    valid = (ids != 9).astype(float)

    def loss():
        logits, vlog = net(ids, emo)
        return ops.bce_with_logits(logits, tgt, valid[..., None]) + ops.bce_with_logits(vlog, voice, valid)
    return loss, net.parameters()


def _duration_case(rng):
    from .prosody.duration import DurationCNN
    net = DurationCNN(vocab_size=9, emb=4, channels=5, kernel=3, layers=2, dropout=0.0,
                      seed=int(rng.integers(1 << 30))).eval()
    ids = np.array([[1, 2, 7, 8], [3, 4, 9, 9]])
    tgt = rng.uniform(1, 6, size=(2, 4))
    w = (ids != 9).astype(float)
    return lambda: ops.mse(net(ids), tgt, w), net.parameters()


MODEL_CASES: dict[str, Callable] = {"translator": _translator_case, "f0_cnn": _f0_case,
                                    "duration_cnn": _duration_case}


def run_grad_checks(seed: int = 0, eps: float = 1e-5, max_entries: int | None = None) -> dict[str, float]:
    """Max relative error per check, all in float64."""
    results = {}
    with nn.precision(np.float64):
        for kind in LAYER_KINDS:
            fn, params = _layer_case(kind, np.random.default_rng([seed, 1]))
            results[kind] = nn.grad_check(fn, params, eps=eps)
        for name, case in MODEL_CASES.items():
            fn, params = case(np.random.default_rng([seed, 2]))
            results[name] = nn.grad_check(fn, params, eps=eps, max_entries=max_entries,
                                          rng=np.random.default_rng([seed, 3]))
    return results
