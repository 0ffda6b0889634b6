import os
import logging
from dataclasses import dataclass

import numpy as np
import soundfile as sf

from .errors import InvalidInput

logger = logging.getLogger(__name__)


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate"""
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / float(self.sample_rate)


def _to_mono(data: np.ndarray) -> np.ndarray:
    if data.ndim == 2:
        return data.mean(axis=1)
    return data


def _read_with_scipy(path: str):
    from scipy.io import wavfile

    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    return data, int(sr)


def read_audio(path: str, clip_id: str = "") -> AudioClip:
    """Read a PCM WAV file as a mono AudioClip"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Audio file not found: {path}")

    try:
        data, sr = sf.read(path, dtype="float64", always_2d=False)
    except Exception as soundfile_error:
        # Fallback for headers libsndfile refuses
        try:
            data, sr = _read_with_scipy(path)
        except Exception as scipy_error:
            raise InvalidInput(
                f"Error reading {path} with both readers. soundfile: {soundfile_error}, scipy: {scipy_error}"
            )

    samples = np.clip(_to_mono(np.asarray(data, dtype=np.float64)), -1.0, 1.0)
    if samples.size == 0:
        raise InvalidInput(f"Empty audio file: {path}")
    return AudioClip(samples=samples, sample_rate=int(sr), id=clip_id or os.path.splitext(os.path.basename(path))[0])


def write_audio(clip: AudioClip, path: str) -> str:
    """Write a clip as 16-bit PCM mono WAV"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sf.write(path, np.clip(clip.samples, -1.0, 1.0), clip.sample_rate, subtype="PCM_16")
    return path
