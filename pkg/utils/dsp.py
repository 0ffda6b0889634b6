"""
Audio front-end: resampling, log-Mel features, augmentation and SNR mixing.

Every function here is a pure function of its inputs (and seed), so a batch
front-end can call them from several worker threads at once.
"""

import math
import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Tuple

import librosa
import numpy as np
from scipy import signal

from .audio_reader import AudioClip, read_audio
from .errors import ConfigError, InvalidInput
from .seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DspConfig:
    target_sr: int = 22050
    n_fft: int = 2048
    win_s: float = 0.040
    hop_s: float = 0.020
    n_mels: int = 64
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.target_sr <= 0 or self.n_fft <= 0 or self.n_mels <= 0:
            raise ConfigError("target_sr, n_fft and n_mels must be positive")
        if self.win_s > self.n_fft / self.target_sr:
            raise ConfigError(f"win_s={self.win_s} exceeds n_fft/target_sr={self.n_fft / self.target_sr:.4f}")
        if not 0 < self.hop_s <= self.win_s:
            raise ConfigError("hop_s must be in (0, win_s]")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.win_s * self.target_sr))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_s * self.target_sr))


@dataclass
class LogMelSpec:
    """T x D log-power mel matrix of one clip"""
    values: np.ndarray
    frame_hop_s: float = 0.020
    clip_id: str = ""

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class SpecAugConfig:
    gamma_t: int = 2
    eta_t0: int = 60
    gamma_f: int = 2
    eta_f0: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.gamma_t, self.eta_t0, self.gamma_f, self.eta_f0) < 0:
            raise ConfigError("SpecAug counts and widths must be >= 0")


@dataclass(frozen=True)
class MixSpec:
    speech_clip_id: str
    noise_clip_id: str
    snr_db: float
    rng_seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise InvalidInput(f"snr_db must be finite, got {self.snr_db}")


# ---------------------------------------------------------------- resampling

def resample(clip: AudioClip, target_sr: int) -> AudioClip:
    """Band-limited (polyphase windowed-sinc) sample-rate conversion"""
    if clip.sample_rate <= 0 or target_sr <= 0:
        raise InvalidInput("sample rates must be positive")
    if len(clip.samples) == 0:
        raise InvalidInput(f"Cannot resample empty clip {clip.id!r}")
    if clip.sample_rate == target_sr:
        return AudioClip(samples=clip.samples.copy(), sample_rate=target_sr, id=clip.id)

    g = math.gcd(int(clip.sample_rate), int(target_sr))
    up, down = target_sr // g, clip.sample_rate // g
    out = signal.resample_poly(np.asarray(clip.samples, dtype=np.float64), up, down)
    return AudioClip(samples=out, sample_rate=target_sr, id=clip.id)


def load_clip(path: str, cfg: DspConfig, clip_id: str = "") -> AudioClip:
    return resample(read_audio(path, clip_id=clip_id), cfg.target_sr)


# ---------------------------------------------------------------- features

@lru_cache(maxsize=8)
def mel_filterbank(target_sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    """HTK-scale triangular filters from 0 Hz to Nyquist, peak 1 (no area norm)"""
    return librosa.filters.mel(
        sr=target_sr, n_fft=n_fft, n_mels=n_mels, fmin=0.0, fmax=target_sr / 2.0,
        htk=True, norm=None, dtype=np.float64,
    )


@lru_cache(maxsize=8)
def _hann(win_length: int) -> np.ndarray:
    return signal.get_window("hann", win_length, fftbins=True)


def num_frames(num_samples: int, cfg: DspConfig) -> int:
    return max(1, math.ceil(num_samples / cfg.hop_length))


def logmel(clip: AudioClip, cfg: DspConfig = DspConfig()) -> LogMelSpec:
    """64-band log-Mel power spectrogram, one frame every hop starting at sample 0"""
    if clip.sample_rate != cfg.target_sr:
        raise InvalidInput(
            f"Clip {clip.id!r} is at {clip.sample_rate} Hz, resample to {cfg.target_sr} Hz first"
        )
    n = len(clip.samples)
    if n == 0:
        raise InvalidInput(f"Empty clip {clip.id!r}")

    hop, win = cfg.hop_length, cfg.win_length
    t = num_frames(n, cfg)
    padded = np.zeros(max(n, (t - 1) * hop + win), dtype=np.float64)
    padded[:n] = clip.samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:t]

    spectrum = np.fft.rfft(frames * _hann(win), n=cfg.n_fft, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel = power @ mel_filterbank(cfg.target_sr, cfg.n_fft, cfg.n_mels).T
    values = np.log(np.maximum(mel, cfg.log_floor))
    return LogMelSpec(values=values, frame_hop_s=cfg.hop_s, clip_id=clip.id)


# ---------------------------------------------------------------- augmentation

def draw_spec_masks(shape: Tuple[int, int], cfg: SpecAugConfig) -> List[Tuple[int, int, int]]:
    """Seeded (axis, start, width) draws: time masks first, then frequency masks"""
    rng = derive_rng(cfg.rng_seed, "specaug")
    masks = []
    for axis, count, max_width in ((0, cfg.gamma_t, cfg.eta_t0), (1, cfg.gamma_f, cfg.eta_f0)):
        extent = shape[axis]
        for _ in range(count):
            width = min(int(rng.integers(0, max_width, endpoint=True)), extent)
            start = int(rng.integers(0, extent - width, endpoint=True))
            masks.append((axis, start, width))
    return masks


def spec_augment(spec: LogMelSpec, cfg: SpecAugConfig) -> LogMelSpec:
    values = spec.values.copy()
    for axis, start, width in draw_spec_masks(values.shape, cfg):
        if axis == 0:
            values[start:start + width, :] = 0.0
        else:
            values[:, start:start + width] = 0.0
    return replace(spec, values=values)


def draw_time_shift(sigma: float, rng_seed: int) -> int:
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    if sigma == 0:
        return 0
    return int(round(derive_rng(rng_seed, "time_shift").normal(0.0, sigma)))


def time_shift(spec: LogMelSpec, sigma: float, rng_seed: int = 0, shift: int = None) -> LogMelSpec:
    """Circularly roll frames by a normal draw, so clip-level labels stay valid"""
    eta = draw_time_shift(sigma, rng_seed) if shift is None else int(shift)
    if eta == 0:
        return replace(spec, values=spec.values.copy())
    return replace(spec, values=np.roll(spec.values, eta, axis=0))


# ---------------------------------------------------------------- mixing

def mean_power(samples: np.ndarray) -> float:
    return float(np.mean(np.square(samples, dtype=np.float64)))


def snr_gain(p_speech: float, p_noise: float, snr_db: float) -> float:
    return math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))


def measure_snr(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(mean_power(speech) / mean_power(noise))


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Loop (wrap-around) or truncate noise to `length` from a random offset"""
    offset = int(rng.integers(0, len(noise)))
    return noise[(offset + np.arange(length)) % len(noise)]


def mix_components(speech: AudioClip, noise: AudioClip, spec: MixSpec):
    """Return (speech, scaled noise, gain) before any peak normalisation"""
    if speech.sample_rate != noise.sample_rate:
        raise InvalidInput(f"Sample rates differ: {speech.sample_rate} vs {noise.sample_rate}")
    if len(speech.samples) == 0 or len(noise.samples) == 0:
        raise InvalidInput("Cannot mix empty clips")

    p_speech = mean_power(speech.samples)
    if p_speech == 0.0:
        raise InvalidInput(f"Speech clip {speech.id!r} has zero power")

    fitted = fit_noise(np.asarray(noise.samples, dtype=np.float64), len(speech.samples),
                       derive_rng(spec.rng_seed, "mix", spec.speech_clip_id, spec.noise_clip_id))
    p_noise = mean_power(fitted)
    if p_noise == 0.0:
        raise InvalidInput(f"Noise clip {noise.id!r} has zero power")

    gain = snr_gain(p_speech, p_noise, spec.snr_db)
    return np.asarray(speech.samples, dtype=np.float64), gain * fitted, gain


def mix_at_snr(speech: AudioClip, noise: AudioClip, spec: MixSpec) -> AudioClip:
    clean, scaled_noise, _ = mix_components(speech, noise, spec)
    mixed = clean + scaled_noise
    peak = float(np.max(np.abs(mixed)))
    if peak > 1.0:
        mixed = mixed / peak
    return AudioClip(samples=mixed, sample_rate=speech.sample_rate, id=speech.id)
