"""Waveform -> stacked log-mel features, plus noise and SpecAugment augmentation.

Pipeline rates: 16 kHz samples -> 80-dim log-mels at 100 Hz -> 160-dim
stacked frames at 50 Hz.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
HOP = 160
WIN = 400
N_FFT = 512
N_MELS = 80
F_MIN = 20.0
F_MAX = 7600.0
LOG_FLOOR = 1e-10


class AudioConfigError(ValueError):
    pass


class AudioInputError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioInputError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(s)):
            raise AudioInputError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # [T, dim]
    frame_rate_hz: float

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AugmentPolicy:
    noise_prob: float = 0.25
    snr_db_range: tuple[float, float] = (-5.0, 20.0)
    specaug_prob: float = 0.9
    freq_mask_count: int = 2
    freq_mask_width: int = 15
    time_mask_count: int = 2
    time_mask_ratio: float = 0.05
    sample_widths: bool = True  # False: every mask uses its maximum width
    seed: int = 0

    def __post_init__(self):
        for p in (self.noise_prob, self.specaug_prob):
            if not 0.0 <= p <= 1.0:
                raise AudioConfigError(f"probability {p} outside [0, 1]")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise AudioConfigError(f"snr range low {lo} > high {hi}")


# ------------------------------------------------------------------ mel scale

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    """[n_mels, n_fft // 2 + 1] triangles evaluated at the FFT bin frequencies."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


_FBANK = mel_filterbank()
_WINDOW = np.hanning(WIN + 1)[:-1]  # periodic Hann


def logmel(w: Waveform) -> FeatureSequence:
    """80-dim natural-log mel energies every 10 ms, ``T = len // 160`` frames."""
    if w.sample_rate_hz != SAMPLE_RATE:
        raise AudioConfigError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate_hz}")
    x = w.samples
    if x.size == 0:
        raise AudioInputError("empty waveform")
    if x.size < WIN:
        raise AudioInputError(f"waveform shorter than one {WIN}-sample window")
    T = x.size // HOP
    pad = WIN // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    # frame t is centred on sample t*HOP + HOP/2 of the original signal
    starts = np.arange(T) * HOP + HOP // 2
    idx = starts[:, None] + np.arange(WIN)[None, :]
    frames = xp[idx] * _WINDOW
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ _FBANK.T
    return FeatureSequence(np.log(np.maximum(mel, LOG_FLOOR)), frame_rate_hz=100.0)


def stack_frames(f: FeatureSequence) -> FeatureSequence:
    """Concatenate consecutive frame pairs; odd T zero-pads the final pair."""
    x = f.frames
    T, d = x.shape
    if T % 2:
        x = np.concatenate([x, np.zeros((1, d), dtype=x.dtype)], axis=0)
    return FeatureSequence(x.reshape(-1, 2 * d), frame_rate_hz=f.frame_rate_hz / 2)


def unstack_frames(f: FeatureSequence) -> FeatureSequence:
    T, d = f.frames.shape
    return FeatureSequence(f.frames.reshape(2 * T, d // 2), frame_rate_hz=f.frame_rate_hz * 2)


# ------------------------------------------------------------------ augmentation

def mix_noise(w: Waveform, noise: Waveform, snr_db: float,
              rng: np.random.Generator | None = None) -> Waveform:
    """Add ``noise`` scaled so that 10*log10(P_signal / P_noise) == snr_db.

    The noise is looped to cover the signal, then cropped at a random offset.
    """
    if noise.sample_rate_hz != SAMPLE_RATE:
        raise AudioConfigError("noise must be 16 kHz")
    n = noise.samples
    p_noise = np.mean(n * n) if n.size else 0.0
    if p_noise <= 0.0:
        raise AudioInputError("noise has zero power")
    L = w.samples.size
    reps = -(-(L + n.size) // n.size)
    looped = np.tile(n, reps)
    off = 0 if rng is None else int(rng.integers(0, n.size))
    seg = looped[off:off + L]
    p_sig = np.mean(w.samples ** 2)
    p_seg = np.mean(seg * seg)
    gain = np.sqrt(p_sig / (p_seg * 10.0 ** (snr_db / 10.0)))
    return Waveform(w.samples + gain * seg, w.sample_rate_hz)


def maybe_add_noise(w: Waveform, noises: list[Waveform], policy: AugmentPolicy,
                    rng: np.random.Generator) -> tuple[Waveform, float | None]:
    """With probability ``noise_prob`` mix a random noise at a uniform SNR."""
    if not noises or rng.random() >= policy.noise_prob:
        return w, None
    snr = float(rng.uniform(*policy.snr_db_range))
    noise = noises[int(rng.integers(0, len(noises)))]
    return mix_noise(w, noise, snr, rng), snr


def spec_augment(f: FeatureSequence, policy: AugmentPolicy,
                 rng: np.random.Generator) -> FeatureSequence:
    """Frequency and time masking filled with the per-utterance mean.

    Applied to 100 Hz log-mels, before stacking. Returns the input unchanged
    when the ``specaug_prob`` draw fails.
    """
    if rng.random() >= policy.specaug_prob:
        return f
    x = f.frames.copy()
    T, d = x.shape
    fill = float(f.frames.mean())

    def draw(max_w, size):
        if max_w > size:
            log.warning("mask width %d exceeds axis size %d; clamped", max_w, size)
            max_w = size
        width = int(rng.integers(0, max_w + 1)) if policy.sample_widths else max_w
        start = int(rng.integers(0, size - width + 1))
        return start, width

    for _ in range(policy.freq_mask_count):
        s, wd = draw(policy.freq_mask_width, d)
        x[:, s:s + wd] = fill
    max_t = int(policy.time_mask_ratio * T)
    for _ in range(policy.time_mask_count):
        s, wd = draw(max_t, T)
        x[s:s + wd, :] = fill
    return FeatureSequence(x, f.frame_rate_hz)


# ------------------------------------------------------------------ sources

def tone_sequence(text: str, tone_map: dict[str, float], tone_s: float = 0.1,
                  amplitude: float = 0.5, fade_s: float = 0.005) -> Waveform:
    """One pure tone per character; short raised-cosine fades mark boundaries."""
    n = int(round(tone_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    nf = int(round(fade_s * SAMPLE_RATE))
    env = np.ones(n)
    if nf:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        env[:nf] = ramp
        env[-nf:] = ramp[::-1]
    pieces = []
    for ch in text:
        try:
            freq = tone_map[ch]
        except KeyError:
            raise AudioInputError(f"character {ch!r} has no tone") from None
        pieces.append(amplitude * env * np.sin(2 * np.pi * freq * t))
    return Waveform(np.concatenate(pieces) if pieces else np.zeros(0))


def read_wav(path) -> Waveform:
    """16-bit PCM mono WAV -> Waveform scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise AudioInputError(f"{path}: need 16-bit mono PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def encoder_features(w: Waveform, policy: AugmentPolicy | None = None,
                     rng: np.random.Generator | None = None) -> FeatureSequence:
    """logmel -> optional SpecAugment -> stacking (the encoder's input)."""
    f = logmel(w)
    if policy is not None and rng is not None:
        f = spec_augment(f, policy, rng)
    return stack_frames(f)
