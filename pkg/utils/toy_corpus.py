"""
Synthetic desk-scale corpus with exact frame ground truth.

"Speech" events are 4 Hz amplitude-modulated harmonic stacks, "Noise" events
band-limited noise bursts and "Tone" events steady sinusoids, all over a low
noise floor. Speech events sit on the 20 ms frame grid and never overlap each
other, so the frame references follow exactly from the schedule.
"""

import os
import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import signal
from tqdm import tqdm

from .audio_reader import AudioClip, write_audio
from .errors import ConfigError
from .file_exports import save_segments_tsv
from .manifest import ManifestRow, write_manifest
from .seeding import derive_rng

logger = logging.getLogger(__name__)

SPEECH = "Speech"
NON_SPEECH_KINDS = ("Noise", "Tone")
NOISE_BANK_KINDS = ("noise", "music", "babble")
PEAK_LIMIT = 0.9


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_clips: int = 20
    clip_dur_s: float = 10.0
    speech_event_rate: float = 2.0
    nonspeech_event_rate: float = 1.0
    speech_clip_prob: float = 0.5
    sr: int = 22050
    hop_s: float = 0.020
    min_event_s: float = 0.3
    max_event_s: float = 1.5
    noise_floor: float = 0.003
    noise_clips_per_kind: int = 0
    prefix: str = "clip"
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ConfigError("n_clips must be >= 1")
        if not 0 < self.clip_dur_s <= 10.0:
            raise ConfigError(f"clip_dur_s must be in (0, 10], got {self.clip_dur_s}")
        if self.speech_event_rate < 0 or self.nonspeech_event_rate < 0:
            raise ConfigError("event rates must be >= 0")
        if not 0 <= self.speech_clip_prob <= 1:
            raise ConfigError("speech_clip_prob must be in [0, 1]")
        if not 0 < self.min_event_s <= self.max_event_s <= self.clip_dur_s:
            raise ConfigError("need 0 < min_event_s <= max_event_s <= clip_dur_s")

    @property
    def num_samples(self) -> int:
        return int(round(self.clip_dur_s * self.sr))

    @property
    def num_frames(self) -> int:
        return max(1, math.ceil(self.num_samples / int(round(self.hop_s * self.sr))))

    @property
    def event_frame_range(self) -> Tuple[int, int]:
        return int(round(self.min_event_s / self.hop_s)), int(round(self.max_event_s / self.hop_s))

    @property
    def max_speech_events(self) -> int:
        return max(1, int(self.num_frames // self.event_frame_range[1]))


@dataclass
class ToyEvent:
    label: str
    onset_s: float
    offset_s: float


@dataclass
class ToyCorpus:
    manifest_path: str
    references_path: str
    rows: List[ManifestRow]
    events: dict
    noise_manifest_path: Optional[str] = None


def stochastic_round(rate: float, rng: np.random.Generator) -> int:
    whole = math.floor(rate)
    return whole + int(rng.random() < rate - whole)


# ---------------------------------------------------------------- sources

def _fade(n: int, sr: int, fade_s: float = 0.010) -> np.ndarray:
    ramp = min(n // 2, int(fade_s * sr))
    envelope = np.ones(n)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        envelope[:ramp] = rise
        envelope[n - ramp:] = rise[::-1]
    return envelope


def harmonic_speech(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """4 Hz AM harmonic stack, f0 in [120, 300] Hz with 4-10 partials"""
    t = np.arange(n) / sr
    f0 = rng.uniform(120.0, 300.0)
    partials = int(rng.integers(4, 10, endpoint=True))
    # slow pitch drift keeps the stack from sounding like a fixed tone
    phase_track = 2 * np.pi * np.cumsum(f0 * (1.0 + 0.05 * np.sin(2 * np.pi * 0.7 * t))) / sr
    stack = np.zeros(n)
    for h in range(1, partials + 1):
        if h * f0 >= sr / 2:
            break
        stack += np.sin(h * phase_track + rng.uniform(0, 2 * np.pi)) / h
    am = 0.55 + 0.45 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
    stack *= am / (np.max(np.abs(stack)) + 1e-12)
    return rng.uniform(0.3, 0.6) * stack * _fade(n, sr)


def noise_burst(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    low = rng.uniform(300.0, 3000.0)
    high = min(low * rng.uniform(1.5, 4.0), 0.45 * sr)
    sos = signal.butter(4, [low, high], btype="bandpass", fs=sr, output="sos")
    burst = signal.sosfilt(sos, rng.standard_normal(n))
    burst /= np.max(np.abs(burst)) + 1e-12
    return rng.uniform(0.1, 0.4) * burst * _fade(n, sr)


def steady_tone(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    tone = np.sin(2 * np.pi * rng.uniform(500.0, 4000.0) * t + rng.uniform(0, 2 * np.pi))
    return rng.uniform(0.1, 0.4) * tone * _fade(n, sr)


SOURCES = {"Noise": noise_burst, "Tone": steady_tone}


def noise_bank_clip(kind: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Background material for SNR mixing"""
    if kind == "noise":
        # roughly pink: white noise through a one-pole low-pass
        audio = signal.lfilter([1.0], [1.0, -0.95], rng.standard_normal(n))
    elif kind == "music":
        t = np.arange(n) / sr
        audio = np.zeros(n)
        note_len = int(0.5 * sr)
        for start in range(0, n, note_len):
            stop = min(n, start + note_len)
            root = 220.0 * 2 ** (int(rng.integers(0, 12)) / 12)
            for ratio in (1.0, 1.26, 1.5):
                audio[start:stop] += np.sin(2 * np.pi * root * ratio * t[start:stop]) * _fade(stop - start, sr)
    elif kind == "babble":
        audio = sum(harmonic_speech(n, sr, rng) for _ in range(6))
    else:
        raise ConfigError(f"Unknown noise kind {kind!r}, expected one of {NOISE_BANK_KINDS}")
    return 0.5 * audio / (np.max(np.abs(audio)) + 1e-12)


# ---------------------------------------------------------------- scheduling

def schedule_speech(spec: ToyCorpusSpec, count: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Non-overlapping (start_frame, num_frames) pairs, one per equal slot of the clip"""
    count = min(count, spec.max_speech_events)
    lo, hi = spec.event_frame_range
    slot = spec.num_frames // max(count, 1)
    placed = []
    for k in range(count):
        length = int(rng.integers(lo, min(hi, slot), endpoint=True))
        start = k * slot + int(rng.integers(0, slot - length, endpoint=True))
        placed.append((start, length))
    return placed


def synth_clip(spec: ToyCorpusSpec, index: int, with_speech: bool):
    """(samples, events, frame flags) of clip `index`"""
    rng = derive_rng(spec.seed, "toy-clip", spec.prefix, index)
    n, sr = spec.num_samples, spec.sr
    hop = int(round(spec.hop_s * sr))
    audio = spec.noise_floor * rng.standard_normal(n)
    frames = np.zeros(spec.num_frames, dtype=np.int8)
    events = []

    n_speech = max(1, stochastic_round(spec.speech_event_rate, rng)) if with_speech else 0
    for start, length in schedule_speech(spec, n_speech, rng):
        a, b = start * hop, min(n, (start + length) * hop)
        if b <= a:
            continue
        audio[a:b] += harmonic_speech(b - a, sr, rng)
        frames[start:start + length] = 1
        events.append(ToyEvent(SPEECH, start * spec.hop_s, (start + length) * spec.hop_s))

    for _ in range(stochastic_round(spec.nonspeech_event_rate, rng)):
        kind = NON_SPEECH_KINDS[int(rng.integers(len(NON_SPEECH_KINDS)))]
        length = int(round(rng.uniform(spec.min_event_s, spec.max_event_s) * sr))
        a = int(rng.integers(0, max(1, n - length)))
        b = min(n, a + length)
        audio[a:b] += SOURCES[kind](b - a, sr, rng)
        events.append(ToyEvent(kind, a / sr, b / sr))

    peak = float(np.max(np.abs(audio)))
    if peak > PEAK_LIMIT:
        audio *= PEAK_LIMIT / peak
    events.sort(key=lambda e: (e.onset_s, e.label))
    return audio, events, frames


def speech_clip_indices(spec: ToyCorpusSpec) -> set:
    if spec.speech_event_rate == 0:
        return set()
    count = int(round(spec.n_clips * spec.speech_clip_prob))
    order = derive_rng(spec.seed, "toy-speech-clips", spec.prefix).permutation(spec.n_clips)
    return set(order[:count].tolist())


def synth_toy_corpus(spec: ToyCorpusSpec, out_dir: str) -> ToyCorpus:
    """Write WAVs, frame references, manifest.tsv and references.tsv under out_dir"""
    audio_dir = os.path.join(out_dir, "audio")
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(audio_dir, exist_ok=True)
    os.makedirs(frame_dir, exist_ok=True)

    with_speech = speech_clip_indices(spec)
    rows, all_events = [], {}
    for i in tqdm(range(spec.n_clips), desc="synth", unit="clip", disable=spec.n_clips < 10, leave=False):
        clip_id = f"{spec.prefix}_{i:05d}"
        audio, events, frames = synth_clip(spec, i, i in with_speech)
        audio_path = os.path.join(audio_dir, f"{clip_id}.wav")
        frame_path = os.path.join(frame_dir, f"{clip_id}.npy")
        write_audio(AudioClip(samples=audio, sample_rate=spec.sr, id=clip_id), audio_path)
        np.save(frame_path, frames)
        labels = tuple(sorted({e.label for e in events}))
        rows.append(ManifestRow(clip_id, audio_path, labels, frame_path))
        all_events[clip_id] = events

    manifest_path = write_manifest(rows, os.path.join(out_dir, "manifest.tsv"))
    references_path = os.path.join(out_dir, "references.tsv")
    save_segments_tsv({clip_id: [(e.onset_s, e.offset_s, e.label) for e in events]
                       for clip_id, events in all_events.items()}, references_path)

    noise_manifest = None
    if spec.noise_clips_per_kind > 0:
        noise_manifest = synth_noise_bank(spec, os.path.join(out_dir, "noise"))
    logger.info(f"Synthesised {len(rows)} toy clip(s) into {out_dir}")
    return ToyCorpus(manifest_path, references_path, rows, all_events, noise_manifest)


def synth_noise_bank(spec: ToyCorpusSpec, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for kind in NOISE_BANK_KINDS:
        for i in range(spec.noise_clips_per_kind):
            rng = derive_rng(spec.seed, "noise-bank", kind, i)
            noise_id = f"{kind}_{i:03d}"
            path = os.path.join(out_dir, f"{noise_id}.wav")
            write_audio(AudioClip(noise_bank_clip(kind, spec.num_samples, spec.sr, rng), spec.sr, noise_id), path)
            rows.append(ManifestRow(noise_id, path, (kind,)))
    return write_manifest(rows, os.path.join(out_dir, "noise_manifest.tsv"))
