import math

import numpy as np
import pytest

from emounits import dsp

SR = 16000
N = np.arange(SR)


@pytest.fixture(scope="module")
def timbre():
    return dsp.TimbreTable.default(64, [0, 1], ["neutral", "amused"])


def test_sine_pitch():
    f = dsp.extract_f0(0.5 * np.sin(2 * np.pi * 200 * N / SR))
    assert np.all(np.abs(f[2:-2] - 200) <= 4)


def test_silence_unvoiced():
    assert not dsp.extract_f0(np.zeros(SR)).any()


def test_sawtooth_no_octave_error():
    saw = 2 * ((100 * N / SR) % 1) - 1
    f = dsp.extract_f0(0.5 * saw)
    assert np.median(f[2:-2]) == pytest.approx(100, rel=0.02)


def test_pitch_rejects_wrong_rate():
    with pytest.raises(dsp.DspError):
        dsp.extract_f0(np.zeros(SR), sample_rate=22050)


def test_mel_silence_is_floor():
    m = dsp.mel_spectrogram(np.zeros(SR))
    assert m.shape == (50, 80)
    assert np.all(m == math.log(1e-5))


def test_mel_frame_count():
    assert dsp.mel_spectrogram(np.zeros(1000)).shape[0] == math.ceil(1000 / 320)


def test_mel_peak_bin_for_440():
    m = dsp.mel_spectrogram(0.5 * np.sin(2 * np.pi * 440 * N / SR))
    centres = dsp.mel_edges()[1:-1]
    expected = int(np.argmin(np.abs(dsp.hz_to_mel(centres) - dsp.hz_to_mel(440))))
    assert np.all(m[1:-1].argmax(axis=1) == expected)


def test_mel_amplitude_doubling():
    x = 0.2 * np.sin(2 * np.pi * 440 * N / SR)
    a, b = dsp.mel_spectrogram(x), dsp.mel_spectrogram(2 * x)
    k = a[10].argmax()
    assert b[10, k] - a[10, k] == pytest.approx(math.log(4), abs=1e-6)


def test_mel_deterministic():
    x = np.random.default_rng(0).uniform(-1, 1, 5000)
    assert dsp.mel_spectrogram(x).tobytes() == dsp.mel_spectrogram(x.copy()).tobytes()


def test_synth_length(timbre):
    assert len(dsp.synthesize([10] * 50, [200.0] * 50, 0, "neutral", timbre)) == 16000
    with pytest.raises(dsp.DspError):
        dsp.synthesize([10] * 5, [200.0] * 4, 0, "neutral", timbre)


def test_synth_constant_round_trip(timbre):
    w = dsp.synthesize([12] * 50, [200.0] * 50, 1, "amused", timbre)
    f = dsp.extract_f0(w)
    assert np.all(np.abs(f[2:-2] - 200) / 200 < 0.05)


def test_synth_unvoiced(timbre):
    w = dsp.synthesize([0] * 50, [0.0] * 50, 0, "neutral", timbre)
    assert not dsp.extract_f0(w).any()


def test_synth_contour_round_trip(timbre):
    rng = np.random.default_rng(4)
    errs = []
    for k in range(4):
        T = 80
        f0 = np.clip(80 + 270 * rng.random() + 40 * np.sin(np.linspace(0, 5, T) + k), 80, 350)
        w = dsp.synthesize(rng.integers(7, 48, T), f0, k % 2, "neutral", timbre)
        est = dsp.extract_f0(w)
        errs.append(np.abs(est[2:-2] - f0[2:-2]) / f0[2:-2])
    assert np.median(np.concatenate(errs)) < 0.05


def test_short_gap_hold():
    f = np.array([200, 0, 0, 210, 0, 0, 0, 220.0])
    held = dsp._hold_short_gaps(f)
    assert held[1:3].tolist() == [200, 200]
    assert held[4:7].tolist() == [0, 0, 0]


def test_timbre_lookup_missing(timbre):
    with pytest.raises(dsp.DspError):
        timbre.lookup(5, "neutral")


# -- GAN losses --------------------------------------------------------------

def test_generator_combination_hand_case():
    assert dsp.combine_generator([1.0], [2.0], 3.0) == 140.0


def test_perfect_generator_and_discriminator():
    ones, zeros = [np.ones(7)], [np.zeros(7)]
    feats = [[np.ones((2, 3))]]
    fool = dsp.gan_losses(ones, ones, feats, feats, np.zeros(4), np.zeros(4))
    assert fool.l_adv == [0.0]
    sharp = dsp.gan_losses(ones, zeros, feats, feats, np.zeros(4), np.zeros(4))
    assert sharp.l_d == [0.0] and sharp.l_d_total == 0.0


def test_loss_bundle_arithmetic():
    rng = np.random.default_rng(5)
    d_real = [rng.random(6), rng.random(4)]
    d_fake = [rng.random(6), rng.random(4)]
    fr = [[rng.random((2, 3)), rng.random(5)], [rng.random(4)]]
    ff = [[rng.random((2, 3)), rng.random(5)], [rng.random(4)]]
    mr, mf = rng.random((3, 80)), rng.random((3, 80))
    b = dsp.gan_losses(d_real, d_fake, fr, ff, mr, mf)
    adv = [np.mean((1 - f) ** 2) for f in d_fake]
    fm = [sum(np.mean(np.abs(x - y)) for x, y in zip(a, c)) for a, c in zip(fr, ff)]
    rec = np.mean(np.abs(mr - mf))
    assert b.l_adv == pytest.approx(adv)
    assert b.l_fm == pytest.approx(fm)
    assert b.l_g_total == pytest.approx(sum(adv) + 2 * sum(fm) + 45 * rec)
    assert b.l_d_total == pytest.approx(sum(np.mean((1 - r) ** 2) + np.mean(f ** 2)
                                            for r, f in zip(d_real, d_fake)))
    for v in [*b.l_adv, *b.l_d, *b.l_fm, b.l_recon, b.l_g_total, b.l_d_total]:
        assert v >= 0


def test_gan_shape_mismatch():
    with pytest.raises(dsp.DspError):
        dsp.gan_losses([np.ones(3)], [np.ones(4)], [[]], [[]], np.zeros(2), np.zeros(2))


def test_constants():
    assert dsp.MPD_PERIODS == (2, 3, 5, 7, 11)
    assert (dsp.LAMBDA_FM, dsp.LAMBDA_R) == (2.0, 45.0)


def test_wav_round_trip(tmp_path):
    x = 0.3 * np.sin(2 * np.pi * 220 * N[:3200] / SR)
    dsp.write_wav(tmp_path / "a.wav", x)
    y, rate = dsp.read_wav(tmp_path / "a.wav")
    assert rate == SR and len(y) == 3200
    assert np.max(np.abs(x - y)) < 1 / 32767
