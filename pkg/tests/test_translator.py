import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from emounits import nn
from emounits.metrics import uer
from emounits.training import TrainConfig
from emounits.translator import (NoiseConfig, TrainingExample, Translator, TranslatorConfig,
                                 TranslatorError, corrupt, finetune_pairs, load_translator,
                                 make_batch, permute_words, pretrain_denoise, sample_span_lengths,
                                 save_translator, seq_ce_loss, translate, translate_batch)
from emounits.units import UnitVocab, collapse

MOTIF = (48, 49, 48)


def tiny(scheme="share_enc", vocab=16, emotions=("neutral", "amused"), **kw):
    args = dict(scheme=scheme, emotions=emotions, vocab_size=vocab, d_model=32, ffn=64,
                layers=1, heads=2, dropout=0.0, seed=0)
    args.update(kw)
    return Translator(TranslatorConfig(**args))


def random_seqs(n, lo, hi, rng, length=(3, 8)):
    out = []
    while len(out) < n:
        s = collapse(rng.integers(lo, hi, rng.integers(length[0], length[1] + 1)).tolist())
        if len(s) >= length[0]:
            out.append(tuple(s))
    return out


# -- noise -------------------------------------------------------------------

V = UnitVocab(64, ("neutral", "amused"))


def test_corrupt_identity_without_noise():
    seq = [0, 5, 9, 0, 3, 7, 0]
    assert corrupt(seq, NoiseConfig.off(), V, 1) == seq


def test_token_mask_all():
    cfg = NoiseConfig(infill_p=0, token_mask_p=1.0, random_mask_p=0, sentence_permutation=False)
    assert corrupt([1, 2, 3, 4], cfg, V, 0) == [V.mask] * 4


def test_corrupt_deterministic_per_seed():
    seq = list(range(1, 30))
    cfg = NoiseConfig()
    assert corrupt(seq, cfg, V, [3, 1]) == corrupt(seq, cfg, V, [3, 1])


def test_span_length_mean():
    spans = sample_span_lengths(10_000, 3.5, np.random.default_rng(0))
    assert abs(spans.mean() - 3.5) <= 0.1


def test_noise_config_validation():
    with pytest.raises(TranslatorError):
        NoiseConfig(token_mask_p=1.5)
    with pytest.raises(TranslatorError):
        NoiseConfig(infill_poisson_lambda=0)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.integers(0, 2**16))
def test_permute_words_keeps_separators_and_words(seq, seed):
    out = permute_words(seq, 0, np.random.default_rng(seed))

    def layout(s):
        words, pattern, cur = [], [], []
        for u in s + [0]:
            if u == 0:
                if cur:
                    words.append(tuple(cur))
                    pattern.append("w")
                    cur = []
                pattern.append("|")
            else:
                cur.append(u)
        return sorted(words), pattern

    assert layout(out) == layout(seq)


# -- loss --------------------------------------------------------------------

def test_seq_ce_uniform_logits():
    logits = nn.Tensor(np.zeros((2, 5, 64)))
    assert seq_ce_loss(logits, np.zeros((2, 5), dtype=int)).item() == pytest.approx(math.log(64))


def test_seq_ce_two_token_hand_case():
    logits = nn.Tensor(np.array([[[1.0, 2.0, 3.0], [0.0, 0.0, math.log(2)]]]))
    expected = (math.log(1 + math.exp(-1) + math.exp(-2)) + math.log(4)) / 2
    assert seq_ce_loss(logits, np.array([[2, 0]])).item() == pytest.approx(expected, abs=1e-6)


def test_seq_ce_length_mismatch():
    with pytest.raises(TranslatorError):
        seq_ce_loss(nn.Tensor(np.zeros((1, 3, 8))), np.zeros((1, 4), dtype=int))


def test_loss_at_init_near_log_vocab():
    model = Translator(TranslatorConfig(vocab_size=64, seed=3)).eval()
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(5):
        srcs = random_seqs(16, 0, 64, rng, (5, 20))
        tgts = random_seqs(16, 0, 64, rng, (5, 20))
        enc, dec, first = model.route("amused")
        src, dec_in, dec_out = make_batch(model, srcs, tgts, first)
        with nn.no_grad():
            losses.append(seq_ce_loss(model(src, dec_in, enc, dec), dec_out, model.vocab.pad).item())
    assert abs(np.mean(losses) - math.log(64)) < 0.2


# -- routing and contracts ---------------------------------------------------

@pytest.mark.parametrize("scheme,enc,dec", [("share_all", 1, 1), ("share_enc", 1, 2), ("share_none", 2, 2)])
def test_scheme_stack_counts(scheme, enc, dec):
    m = tiny(scheme)
    assert (len(m.encoders), len(m.decoders)) == (enc, dec)


def test_share_all_starts_with_emotion_token():
    m = tiny("share_all")
    assert m.route("amused")[2] == m.vocab.emotion_token("amused")
    assert tiny("share_enc").route("amused")[2] == m.vocab.bos


def test_unsupported_emotion():
    m = tiny("share_none")
    with pytest.raises(TranslatorError):
        m.route("angry")
    m.trained = True
    with pytest.raises(TranslatorError):
        translate(m, [1, 2], "angry")
    with pytest.raises(TranslatorError):
        finetune_pairs(m, [TrainingExample((1, 2), (1, 2), "angry")])


def test_untrained_model_refuses():
    with pytest.raises(TranslatorError):
        translate(tiny(), [1, 2, 3], "amused")


def test_empty_source():
    m = tiny()
    m.trained = True
    assert translate(m, [], "amused") == []
    assert translate_batch(m, [[], [3, 4]], "neutral")[0] == []


def test_output_has_only_content_units():
    m = tiny(vocab=16, seed=5)
    m.trained = True
    rng = np.random.default_rng(1)
    for src in random_seqs(10, 0, 16, rng):
        for emo in ("neutral", "amused"):
            out = translate(m, src, emo)
            assert all(0 <= u < 16 for u in out)
            assert out == collapse(out)


@pytest.mark.parametrize("scheme", ["share_all", "share_enc", "share_none"])
def test_checkpoint_round_trip(tmp_path, scheme):
    m = tiny(scheme, seed=7)
    m.trained = True
    save_translator(m, tmp_path / "t.ckpt", {"note": "x"})
    m2, header = load_translator(tmp_path / "t.ckpt")
    assert header["scheme"] == scheme and header["note"] == "x"
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(m2.state_dict()[k], v.astype(np.float32))
    src = [3, 9, 4, 1, 12]
    for emo in ("neutral", "amused"):
        out = translate(m2, src, emo)
        assert out == translate(m, src, emo)
        assert out == collapse(out)


def test_load_rejects_other_checkpoints(tmp_path):
    nn.save_checkpoint(tmp_path / "x.ckpt", {"model_kind": "f0"}, {})
    with pytest.raises(TranslatorError):
        load_translator(tmp_path / "x.ckpt")


# -- training ----------------------------------------------------------------

def token_accuracy(model, seqs):
    enc, dec = next(iter(model.encoders)), next(iter(model.decoders))
    src, dec_in, dec_out = make_batch(model, seqs, seqs, model.vocab.bos)
    with nn.no_grad():
        pred = model(src, dec_in, enc, dec).data.argmax(-1)
    real = dec_out != model.vocab.pad
    return float((pred == dec_out)[real].mean())


@pytest.mark.slow
def test_copy_task_pretraining():
    rng = np.random.default_rng(0)
    seqs = random_seqs(200, 0, 16, rng)
    held = random_seqs(40, 0, 16, rng)
    m = tiny(seed=1, dropout=0.1, layers=2)
    pretrain_denoise(m, seqs, NoiseConfig.off(),
                     TrainConfig(lr=1e-3, batch_size=32, max_steps=2000, eval_every=50, patience=10, seed=0))
    assert token_accuracy(m.eval(), held) > 0.99


def test_pretraining_deterministic():
    rng = np.random.default_rng(2)
    seqs = random_seqs(40, 0, 16, rng)
    cfg = TrainConfig(lr=1e-3, batch_size=8, max_steps=6, eval_every=3, patience=2, seed=4)
    a = pretrain_denoise(tiny(seed=2), seqs, NoiseConfig(), cfg).state_dict()
    b = pretrain_denoise(tiny(seed=2), seqs, NoiseConfig(), cfg).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def dialect_model():
    """share_enc model: neutral target = identity, amused target = append the motif."""
    rng = np.random.default_rng(11)
    srcs = random_seqs(1060, 0, 48, rng)
    train, held = srcs[:1000], srcs[1000:]
    ex = [TrainingExample(s, s, "neutral") for s in train]
    ex += [TrainingExample(s, s + MOTIF, "amused") for s in train]
    m = tiny(vocab=64, seed=3, d_model=48, ffn=96, layers=2)
    finetune_pairs(m, ex, TrainConfig(lr=1e-3, batch_size=32, max_steps=2500, eval_every=100,
                                      patience=6, seed=0))
    return m, held


@pytest.mark.slow
def test_identity_dialect_uer(dialect_model):
    m, held = dialect_model
    hyps = translate_batch(m, held, "neutral")
    assert np.mean([uer(s, h) for s, h in zip(held, hyps)]) < 0.02


@pytest.mark.slow
def test_motif_rule_learned(dialect_model):
    m, held = dialect_model
    hyps = translate_batch(m, held, "amused")
    has = [any(tuple(h[i:i + 3]) == MOTIF for i in range(len(h))) for h in hyps]
    assert np.mean(has) >= 0.95
