import itertools

import numpy as np
import pytest

from emounits.corpus import (CorpusConfig, CorpusError, EmotionTransformSpec, Motif,
                             SpeakerSpec, Utterance, apply_emotion_transform, generate_corpus,
                             load_manifest, make_parallel_pairs, split_by_transcript,
                             split_groups, write_manifest)
from emounits.units import dedup

AMUSED_ALWAYS = {"amused": EmotionTransformSpec(motifs=(Motif((48, 49, 48), 1.0, "end"),),
                                                 f0_shift=0.5)}


def small_cfg(**kw):
    base = dict(n_transcripts=2, speakers=(SpeakerSpec(120, 20), SpeakerSpec(200, 30)),
                emotions=AMUSED_ALWAYS)
    base.update(kw)
    return CorpusConfig(**base)


def content_only(units, k_c=48):
    return dedup([u for u in units if u < k_c])[0]


def test_counting():
    assert len(generate_corpus(small_cfg(), seed=1)) == 8


def test_determinism():
    a = generate_corpus(small_cfg(n_transcripts=5), seed=3)
    b = generate_corpus(small_cfg(n_transcripts=5), seed=3)
    assert [u.units for u in a] == [u.units for u in b]
    assert all(np.array_equal(x.f0, y.f0) for x, y in zip(a, b))
    c = generate_corpus(small_cfg(n_transcripts=5), seed=4)
    assert [u.units for u in a] != [u.units for u in c]


def test_motif_always_present():
    motif = [48, 49, 48]
    for u in generate_corpus(small_cfg(n_transcripts=20), seed=0):
        d = dedup(u.units)[0]
        has = any(d[i:i + 3] == motif for i in range(len(d) - 2))
        assert has == (u.emotion == "amused")


def test_invalid_config():
    with pytest.raises(CorpusError):
        generate_corpus(small_cfg(n_words=0), 0)
    with pytest.raises(CorpusError):
        generate_corpus(small_cfg(emotions={}), 0)
    with pytest.raises(CorpusError, match="reserved range"):
        generate_corpus(small_cfg(emotions={"amused": EmotionTransformSpec(
            motifs=(Motif((3,), 1.0),))}), 0)


def _neutral(units, f0):
    return Utterance("x_neutral", 0, "neutral", "t0", units, f0)


def test_identity_transform():
    u = _neutral([0, 0, 5, 5, 5, 7], [0, 0, 100, 101, 102, 110])
    out = apply_emotion_transform(u, EmotionTransformSpec(), SpeakerSpec(100, 10), seed=0)
    assert out.units == u.units
    np.testing.assert_allclose(out.f0, u.f0)


def test_duration_scaling_round_half_up():
    u = _neutral([5, 5, 6, 6], [100, 100, 110, 110])
    out = apply_emotion_transform(u, EmotionTransformSpec(duration_scale=1.6),
                                  SpeakerSpec(100, 10), seed=0, emotion="sleepy")
    assert dedup(out.units) == ([5, 6], [3, 3])
    assert out.emotion == "sleepy"


def test_f0_shift_in_sigma_units():
    f0 = [0, 100, 120, 140, 0, 130]
    u = _neutral([0, 5, 6, 7, 0, 9], f0)
    out = apply_emotion_transform(u, EmotionTransformSpec(f0_shift=0.8), SpeakerSpec(120, 20),
                                  seed=0, emotion="angry")
    voiced = np.asarray(f0) > 0
    rise = out.f0[voiced].mean() - np.asarray(f0, float)[voiced].mean()
    assert rise == pytest.approx(16.0)
    assert np.all(out.f0[~voiced] == 0)


def test_transform_requires_neutral():
    u = Utterance("x", 0, "amused", "t", [1], [100])
    with pytest.raises(CorpusError):
        apply_emotion_transform(u, EmotionTransformSpec(), SpeakerSpec(100, 10), seed=0)


def test_lexical_preservation_default_transforms():
    corpus = generate_corpus(CorpusConfig(n_transcripts=30), seed=2)
    for p in make_parallel_pairs(corpus):
        assert content_only(p.source.units) == content_only(p.target.units)


def brute_pairs(corpus):
    return [(a.id, b.id) for a, b in itertools.permutations(corpus, 2)
            if a.transcript_group == b.transcript_group and a.emotion != b.emotion]


@pytest.mark.parametrize("n_spk,expected", [(1, 2), (2, 8)])
def test_pair_counts(n_spk, expected):
    cfg = small_cfg(n_transcripts=1, speakers=(SpeakerSpec(120, 20),) * n_spk)
    corpus = generate_corpus(cfg, 0)
    pairs = make_parallel_pairs(corpus)
    assert len(pairs) == len(brute_pairs(corpus)) == expected
    ids = {(p.source.id, p.target.id) for p in pairs}
    assert all((b, a) in ids for a, b in ids)
    assert make_parallel_pairs([]) == []


def _fake_pairs(n_groups):
    out = []
    for g in range(n_groups):
        a = Utterance(f"g{g}_n", 0, "neutral", f"g{g:03d}", [1], [100])
        b = Utterance(f"g{g}_a", 0, "amused", f"g{g:03d}", [1], [100])
        out.extend(make_parallel_pairs([a, b]))
    return out


@pytest.mark.parametrize("n,expected", [(100, (90, 5, 5)), (20, (18, 1, 1))])
def test_split_ratios(n, expected):
    splits = split_by_transcript(_fake_pairs(n), seed=1)
    groups = [{p.source.transcript_group for p in s} for s in splits]
    assert tuple(len(g) for g in groups) == expected
    for x, y in itertools.combinations(groups, 2):
        assert not x & y


def test_split_errors_and_determinism():
    with pytest.raises(CorpusError):
        split_by_transcript(_fake_pairs(2))
    with pytest.raises(CorpusError):
        split_by_transcript(_fake_pairs(10), ratios=(0.5, 0.5, 0.5))
    a = split_by_transcript(_fake_pairs(30), seed=7)
    b = split_by_transcript(_fake_pairs(30), seed=7)
    assert [[p.source.id for p in s] for s in a] == [[p.source.id for p in s] for s in b]


def test_split_files_byte_identical(tmp_path):
    corpus = generate_corpus(small_cfg(n_transcripts=12), seed=0)
    blobs = []
    for run in ("a", "b"):
        for name, part in zip(("train", "valid", "test"), split_groups(corpus, seed=5)):
            write_manifest(tmp_path / run / f"corpus.tsv.{name}", part)
        blobs.append([(tmp_path / run / f"corpus.tsv.{n}").read_bytes()
                      for n in ("train", "valid", "test")])
    assert blobs[0] == blobs[1]


def test_manifest_roundtrip_and_rules(tmp_path):
    corpus = generate_corpus(small_cfg(n_transcripts=1, emotions=AMUSED_ALWAYS), seed=0)[:3]
    write_manifest(tmp_path / "m.tsv", corpus)
    loaded = load_manifest(tmp_path / "m.tsv")
    assert len(loaded) == 3 and not loaded.warnings
    for a, b in zip(corpus, loaded):
        assert a.units == b.units and np.array_equal(a.f0, b.f0)

    (tmp_path / "u.units").write_text(" ".join(["3"] * 100))
    (tmp_path / "u.f0").write_text("\n".join(["120.0"] * 98))
    (tmp_path / "m2.tsv").write_text("# comment\nx\t0\tangry \tt1\tu.units\tu.f0\n")
    loaded = load_manifest(tmp_path / "m2.tsv")
    assert len(loaded[0]) == 98 and loaded[0].emotion == "angry"
    assert len(loaded.warnings) == 1

    (tmp_path / "m3.tsv").write_text("x\t0\tbored\tt1\tu.units\tu.f0\n")
    with pytest.raises(CorpusError, match="unknown emotion"):
        load_manifest(tmp_path / "m3.tsv")
    (tmp_path / "m4.tsv").write_text("x\t0\tangry\n")
    with pytest.raises(CorpusError, match="6 tab-separated"):
        load_manifest(tmp_path / "m4.tsv")
    (tmp_path / "m5.tsv").write_text("x\t0\tangry\tt1\tmissing.units\tu.f0\n")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "m5.tsv")
