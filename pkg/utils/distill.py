"""
Teacher -> student label generation.

A teacher trained on clip labels over many events emits frame probabilities;
the student only needs two columns: the teacher's Speech probability and the
strongest non-speech event at each frame. Soft labels keep those raw values,
hard labels threshold them, dynamic labels harden a random share of the
speech-active frames of each clip.
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .archives import ArchiveRecord, ArchiveWriter, read_archive, read_index, read_record
from .crnn import Crnn, FrameProbs, crnn_forward
from .dsp import DspConfig
from .errors import AlignmentError, ConfigError, DistillationFailed, InvalidInput
from .features import iter_clip_features
from .file_exports import save_as_json
from .seeding import derive_rng

logger = logging.getLogger(__name__)

SCHEMES = ("soft", "hard", "dynamic")


@dataclass(frozen=True)
class DistillConfig:
    # None: take the "Speech" entry of the teacher's label vocabulary
    speech_event_index: Optional[int] = None
    phi: float = 0.5
    dynamic_fraction: float = 0.25
    rng_seed: int = 0
    max_skip_fraction: float = 0.10

    def __post_init__(self):
        if not 0 < self.phi < 1:
            raise ConfigError(f"phi must be in (0, 1), got {self.phi}")
        if not 0 <= self.dynamic_fraction <= 1:
            raise ConfigError(f"dynamic_fraction must be in [0, 1], got {self.dynamic_fraction}")


@dataclass
class StudentTargets:
    """T x 2 (Speech, non-Speech) frame targets; the columns need not sum to 1"""
    values: np.ndarray
    scheme: str = "soft"
    clip_id: str = ""

    def to_record(self) -> ArchiveRecord:
        return ArchiveRecord(clip_id=self.clip_id, values=self.values, scheme=self.scheme)

    @classmethod
    def from_record(cls, record: ArchiveRecord) -> "StudentTargets":
        return cls(values=record.values, scheme=record.scheme, clip_id=record.clip_id)


def pool_teacher_labels(teacher_probs: FrameProbs, cfg: DistillConfig) -> StudentTargets:
    probs = np.asarray(teacher_probs.values)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise InvalidInput(f"Teacher output needs at least 2 events, got shape {probs.shape}")
    speech = cfg.speech_event_index
    if speech is None or not 0 <= speech < probs.shape[1]:
        raise InvalidInput(f"speech_event_index {speech} invalid for {probs.shape[1]} events")

    others = np.delete(probs, speech, axis=1)
    values = np.stack([probs[:, speech], others.max(axis=1)], axis=1)
    return StudentTargets(values=values, scheme="soft", clip_id=teacher_probs.clip_id)


def harden(targets: StudentTargets, phi: float = 0.5) -> StudentTargets:
    values = (targets.values >= phi).astype(targets.values.dtype)
    return StudentTargets(values=values, scheme="hard", clip_id=targets.clip_id)


def dynamize(targets: StudentTargets, cfg: DistillConfig) -> StudentTargets:
    """Harden floor(fraction x speech-active frames) frames drawn without replacement"""
    soft = targets.values
    active = np.flatnonzero(soft[:, 0] >= cfg.phi)
    k = math.floor(cfg.dynamic_fraction * active.size)
    values = soft.copy()
    if k > 0:
        rng = derive_rng(cfg.rng_seed, "dynamic", targets.clip_id)
        drawn = rng.choice(active, size=k, replace=False)
        values[drawn] = (soft[drawn] >= cfg.phi).astype(soft.dtype)
    return StudentTargets(values=values, scheme="dynamic", clip_id=targets.clip_id)


def apply_scheme(soft: StudentTargets, scheme: str, cfg: DistillConfig) -> StudentTargets:
    if scheme == "soft":
        return soft
    if scheme == "hard":
        return harden(soft, cfg.phi)
    if scheme == "dynamic":
        return dynamize(soft, cfg)
    raise ConfigError(f"Unknown label scheme {scheme!r}, expected one of {SCHEMES}")


def resolve_speech_index(teacher: Crnn, cfg: DistillConfig) -> DistillConfig:
    if cfg.speech_event_index is not None:
        return cfg
    return replace(cfg, speech_event_index=teacher.config.speech_index())


@dataclass
class DistillSummary:
    archive_path: str
    written: int
    skipped: List[dict]
    total: int


def distill_corpus(teacher: Crnn, rows: Sequence, out_path: str, cfg: DistillConfig = DistillConfig(),
                   scheme: str = "soft", dsp_cfg: DspConfig = DspConfig(), threads: int = 1,
                   error_report_path: Optional[str] = None, feature_cache: Optional[str] = None) -> DistillSummary:
    """Run the teacher over every manifest row and write one target record per clip.

    Unreadable clips are skipped and listed in the error report; more than
    cfg.max_skip_fraction skipped aborts without leaving an archive behind.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"Unknown label scheme {scheme!r}, expected one of {SCHEMES}")
    if teacher.config.num_outputs < 2:
        raise InvalidInput("Teacher must have at least 2 output events")
    cfg = resolve_speech_index(teacher, cfg)
    rows = list(rows)
    skipped = []

    with ArchiveWriter(out_path) as writer:
        for row, spec in iter_clip_features(rows, dsp_cfg, threads, feature_cache, desc="distill"):
            if isinstance(spec, Exception):
                logger.warning(f"Skipping {row.clip_id}: {spec}")
                skipped.append({"clip_id": row.clip_id, "audio_path": row.audio_path, "error": str(spec)})
                continue
            soft = pool_teacher_labels(crnn_forward(spec, teacher, mode="eval"), cfg)
            soft.values = soft.values.astype(np.float32)
            writer.append(row.clip_id, apply_scheme(soft, scheme, cfg).values, scheme)

        written = len(writer)
        if error_report_path:
            save_as_json({
                "archive": out_path, "scheme": scheme, "total": len(rows),
                "written": written, "skipped": skipped,
            }, error_report_path)
        if rows and len(skipped) / len(rows) > cfg.max_skip_fraction:
            raise DistillationFailed(
                f"{len(skipped)} of {len(rows)} clips could not be read "
                f"(limit {cfg.max_skip_fraction:.0%}); see {error_report_path or 'the log'}"
            )

    logger.info(f"Distilled {written} clip(s) with {scheme} labels into {out_path}")
    return DistillSummary(archive_path=out_path, written=written, skipped=skipped, total=len(rows))


def load_targets(path: str, clip_ids: Optional[Sequence[str]] = None) -> "dict[str, StudentTargets]":
    """clip_id -> targets; with clip_ids only those records are read, in that order"""
    if clip_ids is None:
        return {clip_id: StudentTargets.from_record(r) for clip_id, r in read_archive(path).items()}
    index = read_index(path)
    missing = [clip_id for clip_id in clip_ids if clip_id not in index]
    if missing:
        raise AlignmentError("Manifest clips have no distilled targets", missing)
    return {clip_id: StudentTargets.from_record(read_record(path, clip_id, index)) for clip_id in clip_ids}
