"""Waveform utilities: pitch tracking, log-mel spectrogram, a harmonic vocoder and GAN losses."""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SAMPLE_RATE = 16000
HOP = 320                      # 20 ms, one frame per unit
MSD_POOLING = (2, 4)           # multi-scale discriminator average-pool windows
MPD_PERIODS = (2, 3, 5, 7, 11)
LAMBDA_FM = 2.0
LAMBDA_R = 45.0


class DspError(ValueError):
    pass


def _check_wav(wav, sample_rate) -> np.ndarray:
    if sample_rate != SAMPLE_RATE:
        raise DspError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    x = np.asarray(wav, dtype=np.float64)
    if x.ndim != 1:
        raise DspError("waveform must be mono")
    if not np.all(np.isfinite(x)):
        raise DspError("waveform has non-finite samples")
    return x


def n_frames(n_samples: int, hop: int = HOP) -> int:
    return -(-n_samples // hop)


# -- pitch -------------------------------------------------------------------

@dataclass(frozen=True)
class PitchConfig:
    fmin: float = 60.0
    fmax: float = 400.0
    window: int = 800              # 50 ms analysis window centred on each frame
    voicing_threshold: float = 0.5
    octave_ratio: float = 0.85     # earliest peak within this share of the best one wins
    silence_rms: float = 1e-4


def _norm_autocorr(frame: np.ndarray, max_lag: int) -> np.ndarray:
    x = frame - frame.mean()
    n = len(x)
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:max_lag + 1]
    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    lags = np.arange(max_lag + 1)
    head = sq[n - lags]                 # energy of x[0 : n-lag]
    tail = sq[n] - sq[lags]             # energy of x[lag : n]
    return ac / np.sqrt(np.maximum(head * tail, 1e-20))


def extract_f0(wav, sample_rate: int = SAMPLE_RATE, cfg: PitchConfig = PitchConfig()) -> np.ndarray:
    """Per-20 ms-frame F0 in Hz (0 for unvoiced) by normalised autocorrelation."""
    x = _check_wav(wav, sample_rate)
    if len(x) < HOP:
        raise DspError("waveform shorter than one frame")
    T = n_frames(len(x))
    half = cfg.window // 2
    padded = np.pad(x, (half, half + HOP))
    lo = int(np.floor(sample_rate / cfg.fmax))
    hi = int(np.ceil(sample_rate / cfg.fmin))
    out = np.zeros(T)
    for t in range(T):
        c = t * HOP + HOP // 2 + half
        frame = padded[c - half:c + half]
        if np.sqrt(np.mean(frame ** 2)) < cfg.silence_rms:
            continue
        r = _norm_autocorr(frame, hi + 1)
        seg = r[lo:hi + 1]
        best = seg.max()
        if best < cfg.voicing_threshold:
            continue
        peaks = [i for i in range(1, len(seg) - 1)
                 if seg[i] >= seg[i - 1] and seg[i] >= seg[i + 1] and seg[i] >= cfg.octave_ratio * best]
        i = peaks[0] if peaks else int(seg.argmax())
        lag = lo + i
        if 0 < i < len(seg) - 1:
            a, b, d = seg[i - 1], seg[i], seg[i + 1]
            den = a - 2 * b + d
            if den < 0:
                lag = lag + 0.5 * (a - d) / den
        f = sample_rate / lag
        if cfg.fmin <= f <= cfg.fmax:
            out[t] = f
    return out


# -- mel ---------------------------------------------------------------------

@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 1024
    hop: int = HOP
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    floor: float = 1e-5
    version: int = 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """The ``mel_bins + 2`` filter corner frequencies in Hz."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))


def mel_filterbank(cfg: MelConfig = MelConfig(), sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / sample_rate)
    pts = mel_edges(cfg)
    fb = np.zeros((cfg.mel_bins, len(freqs)))
    for m in range(cfg.mel_bins):
        l, c, r = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - l) / (c - l)
        down = (r - freqs) / (r - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_spectrogram(wav, sample_rate: int = SAMPLE_RATE, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Natural-log mel power spectrogram, shape ``(ceil(len / hop), mel_bins)``."""
    x = _check_wav(wav, sample_rate)
    T = n_frames(len(x), cfg.hop)
    half = cfg.n_fft // 2
    need = (T - 1) * cfg.hop + cfg.n_fft
    padded = np.pad(x, (half, max(0, need - len(x) - half)), mode="reflect") if len(x) > 1 \
        else np.zeros(need)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[::cfg.hop][:T]
    spec = np.abs(np.fft.rfft(frames * np.hanning(cfg.n_fft + 1)[:-1], axis=-1)) ** 2
    return np.log(np.maximum(spec @ mel_filterbank(cfg, sample_rate).T, cfg.floor))


# -- vocoder -----------------------------------------------------------------

MAX_HARMONICS = 10
CROSSFADE = 80          # 5 ms
GAP_HOLD = 3            # unvoiced gaps shorter than this keep the previous F0 for phase


@dataclass
class TimbreTable:
    """Per (speaker, emotion, unit) harmonic rolloff exponent and noise mix."""
    speakers: tuple
    emotions: tuple
    rolloff: np.ndarray        # (speakers, emotions, vocab)
    noise_mix: np.ndarray      # same shape, in [0, 1]

    def __post_init__(self):
        shape = (len(self.speakers), len(self.emotions))
        if self.rolloff.shape[:2] != shape or self.noise_mix.shape != self.rolloff.shape:
            raise DspError("timbre table shape does not match speakers x emotions x vocab")

    @classmethod
    def default(cls, vocab_size: int, speakers: Sequence[int], emotions: Sequence[str], seed: int = 0):
        rng = np.random.default_rng([seed, 0x71])
        shape = (len(speakers), len(emotions), vocab_size)
        return cls(tuple(speakers), tuple(emotions), rng.uniform(0.8, 1.6, shape),
                   rng.uniform(0.02, 0.08, shape))

    def lookup(self, speaker: int, emotion: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            s = self.speakers.index(speaker)
            e = self.emotions.index(emotion)
        except ValueError:
            raise DspError(f"timbre table has no entry for speaker {speaker}, emotion {emotion!r}") from None
        return self.rolloff[s, e], self.noise_mix[s, e]


def _hold_short_gaps(f0: np.ndarray) -> np.ndarray:
    out = f0.copy()
    voiced = np.flatnonzero(f0 > 0)
    for a, b in zip(voiced[:-1], voiced[1:]):
        if 1 < b - a <= GAP_HOLD:
            out[a + 1:b] = f0[a]
    return out


def _frames_to_samples(values: np.ndarray) -> np.ndarray:
    """Linear interpolation between frame centres, held flat at both ends."""
    T = len(values)
    centres = np.arange(T) * HOP + HOP / 2
    return np.interp(np.arange(T * HOP), centres, values)


def _crossfade(per_frame: np.ndarray) -> np.ndarray:
    """Frame values held per sample, smoothed by a 5 ms moving average."""
    step = np.repeat(per_frame, HOP, axis=0)
    pad = [(CROSSFADE // 2, CROSSFADE - CROSSFADE // 2 - 1)] + [(0, 0)] * (step.ndim - 1)
    p = np.pad(step, pad, mode="edge")
    c = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(p, axis=0)])
    return (c[CROSSFADE:] - c[:-CROSSFADE]) / CROSSFADE


def synthesize(units: Sequence[int], f0, speaker: int, emotion: str, timbre: TimbreTable,
               seed: int = 0, gain: float = 0.5) -> np.ndarray:
    """Frame-rate units and F0 to exactly ``len(units) * 320`` samples at 16 kHz."""
    units = np.asarray(units, dtype=np.int64)
    f0 = np.asarray(f0, dtype=np.float64)
    if units.shape != f0.shape:
        raise DspError(f"{len(units)} unit frames but {len(f0)} F0 frames")
    T = len(units)
    if T == 0:
        return np.zeros(0)
    rolloff, noise_mix = timbre.lookup(speaker, emotion)
    if units.max() >= rolloff.shape[0] or units.min() < 0:
        raise DspError("unit outside the timbre table vocabulary")
    voiced = f0 > 0
    held = _hold_short_gaps(f0)
    # fill the remaining unvoiced stretches so interpolation never dips towards 0
    if voiced.any():
        idx = np.flatnonzero(held > 0)
        held = np.interp(np.arange(T), idx, held[idx])
    f_s = _frames_to_samples(held)
    phase = 2 * np.pi * np.cumsum(f_s) / SAMPLE_RATE
    h = np.arange(1, MAX_HARMONICS + 1)
    amps = h[None, :] ** -rolloff[units][:, None]                  # (T, H)
    amps = amps / amps.sum(axis=1, keepdims=True)
    amps = _crossfade(amps)                                         # (N, H)
    audible = (h[None, :] * f_s[:, None]) < SAMPLE_RATE / 2
    harmonic = (amps * audible * np.sin(h[None, :] * phase[:, None])).sum(axis=1)
    v_env = _crossfade(voiced.astype(np.float64))
    rng = np.random.default_rng([seed, 0x5A])
    noise = rng.standard_normal(T * HOP)
    noise = np.convolve(noise, [0.5, 0.5], mode="same")             # mild low-pass colour
    n_env = _crossfade(np.where(voiced, noise_mix[units], 0.3))
    out = gain * (v_env * harmonic + n_env * noise * 0.3)
    return np.clip(out, -1.0, 1.0)


# -- GAN losses --------------------------------------------------------------

@dataclass
class LossBundle:
    l_adv: list
    l_d: list
    l_fm: list
    l_recon: float
    l_g_total: float
    l_d_total: float
    lambda_fm: float = LAMBDA_FM
    lambda_r: float = LAMBDA_R


def combine_generator(l_adv: Sequence[float], l_fm: Sequence[float], l_recon: float,
                      lambda_fm: float = LAMBDA_FM, lambda_r: float = LAMBDA_R) -> float:
    if len(l_adv) != len(l_fm):
        raise DspError("one feature-matching term per discriminator required")
    return float(sum(a + lambda_fm * f for a, f in zip(l_adv, l_fm)) + lambda_r * l_recon)


def _same(a, b, what):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DspError(f"{what}: shape {a.shape} vs {b.shape}")
    return a, b


def gan_losses(d_real, d_fake, feats_real, feats_fake, mel_real, mel_fake,
               lambda_fm: float = LAMBDA_FM, lambda_r: float = LAMBDA_R) -> LossBundle:
    """Least-squares adversarial, feature-matching and mel reconstruction terms.

    Squared and absolute norms are averaged over elements, so the terms do
    not scale with signal length.
    """
    if not (len(d_real) == len(d_fake) == len(feats_real) == len(feats_fake)):
        raise DspError("real and fake structures must list the same discriminators")
    l_adv, l_d, l_fm = [], [], []
    for i, (r, f) in enumerate(zip(d_real, d_fake)):
        r, f = _same(r, f, f"discriminator {i} output")
        l_adv.append(float(np.mean((1 - f) ** 2)))
        l_d.append(float(np.mean((1 - r) ** 2) + np.mean(f ** 2)))
    for i, (fr, ff) in enumerate(zip(feats_real, feats_fake)):
        if len(fr) != len(ff):
            raise DspError(f"discriminator {i}: layer counts differ")
        total = 0.0
        for j, (a, b) in enumerate(zip(fr, ff)):
            a, b = _same(a, b, f"discriminator {i} layer {j}")
            total += float(np.mean(np.abs(a - b)))
        l_fm.append(total)
    mr, mf = _same(mel_real, mel_fake, "mel")
    l_recon = float(np.mean(np.abs(mr - mf)))
    return LossBundle(l_adv, l_d, l_fm, l_recon,
                      combine_generator(l_adv, l_fm, l_recon, lambda_fm, lambda_r),
                      float(sum(l_d)), lambda_fm, lambda_r)


# -- WAV and F0 files --------------------------------------------------------

def write_wav(path, wav, sample_rate: int = SAMPLE_RATE) -> None:
    x = _check_wav(wav, sample_rate)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise DspError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, rate
