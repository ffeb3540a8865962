"""Unit-to-unit translation between emotions with a small Transformer.

Three weight-sharing schemes:

* ``share_all``  one encoder and one decoder; the decoder prompt starts with
  the target-emotion token instead of BOS.
* ``share_enc``  one encoder, one decoder per target emotion.
* ``share_none`` one encoder and one decoder per target emotion.

The token embedding table is shared by every stack and tied to the output
projection.  Sequences are deduped content; special tokens only exist here.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import ops
from .training import EarlyStopper, TrainConfig, batches, split_valid
from .units import UnitVocab, collapse

SCHEMES = ("share_all", "share_enc", "share_none")
SHARED = "shared"
OUTPUT_GAIN_INIT = 0.5


class TranslatorError(ValueError):
    pass


@dataclass
class NoiseConfig:
    infill_poisson_lambda: float = 3.5
    infill_p: float = 0.1              # chance that a span starts at a given position
    token_mask_p: float = 0.3
    random_mask_p: float = 0.1
    sentence_permutation: bool = True
    separator: int | None = 0

    def __post_init__(self):
        for name in ("infill_p", "token_mask_p", "random_mask_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise TranslatorError(f"{name} must be in [0, 1], got {v}")
        if self.infill_poisson_lambda <= 0:
            raise TranslatorError("Poisson lambda must be positive")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(infill_p=0.0, token_mask_p=0.0, random_mask_p=0.0, sentence_permutation=False)


def sample_span_lengths(n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(lam, size=n)


def permute_words(seq: list[int], separator: int, rng: np.random.Generator) -> list[int]:
    """Shuffle separator-delimited word segments, keeping separators in place."""
    words, cur, layout = [], [], []
    for u in seq:
        if u == separator:
            if cur:
                words.append(cur)
                layout.append(None)
                cur = []
            layout.append(u)
        else:
            cur.append(u)
    if cur:
        words.append(cur)
        layout.append(None)
    if len(words) < 2:
        return list(seq)
    order = rng.permutation(len(words))
    it = iter(words[i] for i in order)
    out = []
    for slot in layout:
        out.extend(next(it) if slot is None else [slot])
    return out


def corrupt(seq: Sequence[int], cfg: NoiseConfig, vocab: UnitVocab, seed) -> list[int]:
    """Noised copy of a deduped sequence for denoising pretraining."""
    rng = np.random.default_rng(seed)
    out = [int(u) for u in seq]
    if cfg.sentence_permutation and cfg.separator is not None:
        out = permute_words(out, cfg.separator, rng)
    if cfg.infill_p > 0:
        filled, i = [], 0
        while i < len(out):
            if rng.random() < cfg.infill_p:
                span = int(sample_span_lengths(1, cfg.infill_poisson_lambda, rng)[0])
                filled.append(vocab.mask)
                if span == 0:
                    filled.append(out[i])
                    i += 1
                else:
                    i += span
            else:
                filled.append(out[i])
                i += 1
        out = filled
    if cfg.token_mask_p > 0:
        hit = rng.random(len(out)) < cfg.token_mask_p
        out = [vocab.mask if h else u for u, h in zip(out, hit)]
    if cfg.random_mask_p > 0:
        hit = rng.random(len(out)) < cfg.random_mask_p
        rand = rng.integers(0, vocab.size, size=len(out))
        out = [int(r) if h and u != vocab.mask else u for u, h, r in zip(out, hit, rand)]
    return out


# -- network -----------------------------------------------------------------

class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout, rng):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, heads, rng, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.FeedForward(d, ffn, rng, dropout)
        self.drop = nn.Dropout(dropout, rng)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout, rng):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiHeadAttention(d, heads, rng, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.cross = nn.MultiHeadAttention(d, heads, rng, dropout)
        self.ln3 = nn.LayerNorm(d)
        self.ff = nn.FeedForward(d, ffn, rng, dropout)
        self.drop = nn.Dropout(dropout, rng)

    def forward(self, y, memory, self_mask, mem_mask):
        h = self.ln1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross(self.ln2(y), memory, mem_mask))
        return y + self.drop(self.ff(self.ln3(y)))


class Stack(nn.Module):
    def __init__(self, kind, d, heads, ffn, layers, dropout, rng):
        super().__init__()
        cls = EncoderLayer if kind == "enc" else DecoderLayer
        self.layers = [self.add_module(f"layer{i}", cls(d, heads, ffn, dropout, rng))
                       for i in range(layers)]
        self.ln = nn.LayerNorm(d)


@dataclass
class TranslatorConfig:
    scheme: str = "share_enc"
    emotions: tuple = ("neutral", "amused")
    vocab_size: int = 64
    d_model: int = 64
    ffn: int = 128
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    seed: int = 0
    beam: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise TranslatorError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        self.emotions = tuple(self.emotions)

    def to_dict(self):
        d = asdict(self)
        d["emotions"] = list(self.emotions)
        return d


class Translator(nn.Module):
    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = UnitVocab(cfg.vocab_size, cfg.emotions)
        rng = np.random.default_rng(cfg.seed)
        self.drop_rng = np.random.default_rng([cfg.seed, 3])
        d = cfg.d_model
        self.embed = nn.Embedding(self.vocab.total, d, rng)
        self.drop = nn.Dropout(cfg.dropout, self.drop_rng)
        if cfg.scheme == "share_none":
            enc_keys = list(cfg.emotions)
        else:
            enc_keys = [SHARED]
        dec_keys = [SHARED] if cfg.scheme == "share_all" else list(cfg.emotions)
        self.encoders = {k: self.add_module(f"enc_{k}", Stack("enc", d, cfg.heads, cfg.ffn,
                                                             cfg.layers, cfg.dropout, rng))
                         for k in enc_keys}
        self.decoders = {k: self.add_module(f"dec_{k}", Stack("dec", d, cfg.heads, cfg.ffn,
                                                             cfg.layers, cfg.dropout, rng))
                         for k in dec_keys}
        # small output scale keeps the initial loss near ln(output vocabulary)
        for st in self.decoders.values():
            st.ln.gain.data[:] = OUTPUT_GAIN_INIT
        # decode may only emit unit ids and EOS
        self._blocked = np.ones(self.vocab.total, dtype=bool)
        self._blocked[:self.vocab.size] = False
        self._blocked[self.vocab.eos] = False
        self.trained = False

    # routing
    def route(self, target_emotion: str) -> tuple[str, str, int]:
        """``(encoder key, decoder key, first decoder token)`` for a target emotion."""
        if target_emotion not in self.cfg.emotions:
            raise TranslatorError(
                f"emotion {target_emotion!r} not supported by this {self.cfg.scheme} model "
                f"(has {list(self.cfg.emotions)})")
        if self.cfg.scheme == "share_all":
            return SHARED, SHARED, self.vocab.emotion_token(target_emotion)
        if self.cfg.scheme == "share_enc":
            return SHARED, target_emotion, self.vocab.bos
        return target_emotion, target_emotion, self.vocab.bos

    def _embed(self, ids: np.ndarray) -> nn.Tensor:
        L = ids.shape[1]
        d = self.cfg.d_model
        x = self.embed(ids) * math.sqrt(d)
        pe = nn.sinusoid_positions(L, d, self.embed.weight.dtype)
        return self.drop(x + nn.Tensor(pe))

    def encode(self, enc_key: str, src: np.ndarray):
        stack = self.encoders[enc_key]
        mask = nn.padding_mask(src, self.vocab.pad)
        x = self._embed(src)
        for layer in stack.layers:
            x = layer(x, mask)
        return stack.ln(x), mask

    def decode(self, dec_key: str, dec_in: np.ndarray, memory, mem_mask) -> nn.Tensor:
        stack = self.decoders[dec_key]
        L = dec_in.shape[1]
        self_mask = nn.causal_mask(L) | nn.padding_mask(dec_in, self.vocab.pad)
        y = self._embed(dec_in)
        for layer in stack.layers:
            y = layer(y, memory, self_mask, mem_mask)
        y = stack.ln(y)
        logits = y @ self.embed.weight.transpose(1, 0)
        return ops.masked_fill(logits, self._blocked, nn.NEG_INF)

    def forward(self, src: np.ndarray, dec_in: np.ndarray, enc_key: str, dec_key: str):
        memory, mem_mask = self.encode(enc_key, src)
        return self.decode(dec_key, dec_in, memory, mem_mask)

    def header(self) -> dict:
        return {"model_kind": "translator", **self.cfg.to_dict(), "vocab": self.vocab.reserved}

    def copy_stacks_from(self, enc_key: str, dec_key: str):
        """Initialise every stack from the given (pretrained) pair."""
        src_e = self.encoders[enc_key].state_dict()
        src_d = self.decoders[dec_key].state_dict()
        for k, st in self.encoders.items():
            if k != enc_key:
                st.load_state_dict(src_e)
        for k, st in self.decoders.items():
            if k != dec_key:
                st.load_state_dict(src_d)


# -- batching ----------------------------------------------------------------

def _pad(seqs, pad) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(model: Translator, srcs, tgts, first_token: int):
    v = model.vocab
    src = _pad([list(s) + [v.eos] for s in srcs], v.pad)
    dec_in = _pad([[first_token] + list(t) for t in tgts], v.pad)
    dec_out = _pad([list(t) + [v.eos] for t in tgts], v.pad)
    return src, dec_in, dec_out


def seq_ce_loss(logits: nn.Tensor, target: np.ndarray, pad: int | None = None) -> nn.Tensor:
    """Mean token cross-entropy under teacher forcing."""
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise TranslatorError(f"logits cover {logits.shape[:-1]} positions, target {target.shape}")
    return ops.cross_entropy(logits, target, ignore_index=pad)


@dataclass
class TrainingExample:
    src: tuple
    tgt: tuple
    target_emotion: str


def _grouped_batches(examples, model: Translator, cfg: TrainConfig, rng):
    """Minibatches that share a decoder route."""
    groups: dict[tuple, list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault(model.route(ex.target_emotion)[:2], []).append(i)
    keys = sorted(groups)
    if model.cfg.scheme == "share_all":
        yield from batches(len(examples), cfg.batch_size, rng, cfg.max_steps)
        return
    sizes = np.array([len(groups[k]) for k in keys], dtype=float)
    probs = sizes / sizes.sum()
    for _ in range(cfg.max_steps):
        k = keys[int(rng.choice(len(keys), p=probs))]
        members = groups[k]
        take = min(cfg.batch_size, len(members))
        yield np.asarray(members)[rng.choice(len(members), size=take, replace=False)]


def batch_loss(model: Translator, batch: Sequence[TrainingExample], route=None):
    """Loss over a batch whose items share one route."""
    enc_key, dec_key, _ = route or model.route(batch[0].target_emotion)
    firsts = [model.route(ex.target_emotion)[2] for ex in batch]
    v = model.vocab
    src = _pad([list(ex.src) + [v.eos] for ex in batch], v.pad)
    dec_in = _pad([[f] + list(ex.tgt) for f, ex in zip(firsts, batch)], v.pad)
    dec_out = _pad([list(ex.tgt) + [v.eos] for ex in batch], v.pad)
    logits = model(src, dec_in, enc_key, dec_key)
    return seq_ce_loss(logits, dec_out, v.pad)


def _eval_loss(model: Translator, examples, batch_size=64) -> float:
    model.eval()
    total, count = 0.0, 0
    with nn.no_grad():
        by_route: dict[tuple, list] = {}
        for ex in examples:
            by_route.setdefault(model.route(ex.target_emotion)[:2], []).append(ex)
        for key in sorted(by_route):
            items = by_route[key]
            for i in range(0, len(items), batch_size):
                chunk = items[i:i + batch_size]
                n_tok = sum(len(ex.tgt) + 1 for ex in chunk)
                total += batch_loss(model, chunk).item() * n_tok
                count += n_tok
    return total / max(count, 1)


def _fit(model: Translator, examples, valid, cfg: TrainConfig, log=None, tag="train"):
    if not examples:
        raise TranslatorError("no training examples")
    params = model.named_parameters()
    opt = nn.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    stopper = EarlyStopper(cfg.patience)
    rng = np.random.default_rng([cfg.seed, 17])
    step = 0
    for idx in _grouped_batches(examples, model, cfg, rng):
        model.train()
        opt.zero_grad()
        loss = batch_loss(model, [examples[i] for i in idx])
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.eval_every == 0:
            vl = _eval_loss(model, valid)
            if log:
                log(f"{tag} step {step} loss {loss.item():.4f} valid_loss {vl:.4f}")
            if stopper.update(vl, model.state_dict()):
                break
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    model.eval()
    model.trained = True
    return stopper


def pretrain_denoise(model: Translator, sequences: Sequence[Sequence[int]], noise: NoiseConfig,
                     cfg: TrainConfig | None = None, log=None, valid=None) -> Translator:
    """Train the first (encoder, decoder) pair to reconstruct clean sequences from noised ones,
    then copy it into every other stack."""
    cfg = cfg or TrainConfig()
    seqs = [tuple(s) for s in sequences if len(s)]
    if not seqs:
        raise TranslatorError("empty pretraining corpus")
    if valid is None:
        seqs, valid = split_valid(seqs, cfg.seed)
    enc_key = next(iter(model.encoders))
    dec_key = next(iter(model.decoders))
    route = (enc_key, dec_key, model.vocab.bos)
    rng = np.random.default_rng([cfg.seed, 23])
    v = model.vocab
    opt = nn.Adam(model.named_parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    stopper = EarlyStopper(cfg.patience)
    fixed_valid = [TrainingExample(tuple(corrupt(s, noise, v, [cfg.seed, 5, i])), tuple(s), "")
                   for i, s in enumerate(valid)]

    def loss_for(items):
        src = _pad([list(ex.src) + [v.eos] for ex in items], v.pad)
        dec_in = _pad([[v.bos] + list(ex.tgt) for ex in items], v.pad)
        dec_out = _pad([list(ex.tgt) + [v.eos] for ex in items], v.pad)
        return seq_ce_loss(model(src, dec_in, enc_key, dec_key), dec_out, v.pad)

    step = 0
    for idx in batches(len(seqs), cfg.batch_size, rng, cfg.max_steps):
        model.train()
        items = [TrainingExample(tuple(corrupt(seqs[i], noise, v, [cfg.seed, 6, step, int(i)])),
                                 seqs[i], "") for i in idx]
        opt.zero_grad()
        loss = loss_for(items)
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.eval_every == 0:
            model.eval()
            with nn.no_grad():
                vl = float(np.mean([loss_for(fixed_valid[i:i + 64]).item()
                                    for i in range(0, len(fixed_valid), 64)]))
            if log:
                log(f"pretrain step {step} loss {loss.item():.4f} valid_loss {vl:.4f}")
            if stopper.update(vl, model.state_dict()):
                break
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    model.copy_stacks_from(route[0], route[1])
    model.eval()
    model.trained = True
    return model


def finetune_pairs(model: Translator, pairs: Sequence[TrainingExample], cfg: TrainConfig | None = None,
                   valid: Sequence[TrainingExample] | None = None, log=None) -> Translator:
    """Fit the translation objective on (source, target, target emotion) examples."""
    cfg = cfg or TrainConfig()
    pairs = list(pairs)
    for ex in pairs + list(valid or []):
        model.route(ex.target_emotion)
    if valid is None:
        pairs, valid = split_valid(pairs, cfg.seed)
    _fit(model, pairs, valid, cfg, log, tag="finetune")
    return model


def examples_from_pairs(pairs) -> list[TrainingExample]:
    """Deduped (source, target, target emotion) triples from ``ParallelPair`` objects."""
    return [TrainingExample(tuple(collapse(p.source.units)), tuple(collapse(p.target.units)),
                            p.target.emotion) for p in pairs]


# -- inference ---------------------------------------------------------------

def _clean(ids: Sequence[int], vocab: UnitVocab) -> list[int]:
    out = []
    for u in ids:
        if u == vocab.eos:
            break
        if 0 <= u < vocab.size:
            out.append(int(u))
    return collapse(out)


def translate_batch(model: Translator, sources: Sequence[Sequence[int]], target_emotion: str,
                    beam: int | None = None) -> list[list[int]]:
    """Greedy (or beam) decoding for a batch of deduped sources."""
    if not model.trained:
        raise TranslatorError("model is not trained")
    enc_key, dec_key, first = model.route(target_emotion)
    beam = beam or model.cfg.beam
    results: list[list[int] | None] = [None] * len(sources)
    todo = [i for i, s in enumerate(sources) if len(s)]
    for i, s in enumerate(sources):
        if not len(s):
            results[i] = []
    if not todo:
        return results
    if beam > 1:
        for i in todo:
            results[i] = _beam_search(model, sources[i], enc_key, dec_key, first, beam)
        return results
    model.eval()
    v = model.vocab
    with nn.no_grad():
        src = _pad([list(sources[i]) + [v.eos] for i in todo], v.pad)
        memory, mem_mask = model.encode(enc_key, src)
        caps = np.array([2 * len(sources[i]) + 32 for i in todo])
        out = np.full((len(todo), 1), first, dtype=np.int64)
        done = np.zeros(len(todo), dtype=bool)
        for t in range(int(caps.max())):
            logits = model.decode(dec_key, out, memory, mem_mask).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            nxt = np.where(done, v.pad, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= (nxt == v.eos) | (t + 1 >= caps)
            if done.all():
                break
    for row, i in enumerate(todo):
        results[i] = _clean(out[row, 1:1 + caps[row]], v)
    return results


def _beam_search(model, source, enc_key, dec_key, first, width):
    v = model.vocab
    cap = 2 * len(source) + 32
    with nn.no_grad():
        src = np.array([list(source) + [v.eos]], dtype=np.int64)
        memory, mem_mask = model.encode(enc_key, src)
        beams = [([first], 0.0)]
        finished = []
        for _ in range(cap):
            prefixes = np.array([b[0] for b in beams], dtype=np.int64)
            mem = nn.Tensor(np.repeat(memory.data, len(beams), axis=0))
            logp = ops.log_softmax(nn.Tensor(
                model.decode(dec_key, prefixes, mem, np.repeat(mem_mask, len(beams), 0)).data[:, -1, :]))
            cand = []
            for bi, (seq, score) in enumerate(beams):
                top = np.argsort(-logp.data[bi], kind="stable")[:width]
                cand.extend((seq + [int(t)], score + float(logp.data[bi, t])) for t in top)
            cand.sort(key=lambda c: -c[1])
            beams = []
            for seq, score in cand:
                (finished if seq[-1] == v.eos else beams).append((seq, score))
                if len(beams) >= width:
                    break
            if not beams or len(finished) >= width:
                break
        pool = finished or beams
        best = max(pool, key=lambda c: c[1])[0]
    return _clean(best[1:], v)


def translate(model: Translator, src: Sequence[int], target_emotion: str, beam: int | None = None) -> list[int]:
    return translate_batch(model, [src], target_emotion, beam)[0]


# -- checkpoints -------------------------------------------------------------

def save_translator(model: Translator, path, extra: dict | None = None):
    nn.save_checkpoint(path, {**model.header(), **(extra or {})}, model.state_dict())


def load_translator(path) -> tuple[Translator, dict]:
    header, params = nn.load_checkpoint(path)
    if header.get("model_kind") != "translator":
        raise TranslatorError(f"{path}: not a translator checkpoint")
    keys = {f.name for f in TranslatorConfig.__dataclass_fields__.values()}
    cfg = TranslatorConfig(**{k: header[k] for k in keys if k in header})
    model = Translator(cfg)
    model.load_state_dict(params)
    model.trained = True
    model.eval()
    return model, header
