"""
End-to-end stages behind the command line: train a teacher on clip labels,
distill frame targets, train a student, run inference, score the result.
Each stage reads and writes files only, so stages can be rerun separately.
"""

import os
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .archives import PROBS_SCHEME, ArchiveWriter, read_archive
from .audio_reader import AudioClip, read_audio, write_audio
from .crnn import STUDENT_LABELS, Crnn, CrnnConfig, FrameProbs, crnn_forward
from .distill import DistillConfig, DistillSummary, distill_corpus, load_targets, pool_teacher_labels
from .dsp import DspConfig, MixSpec, SpecAugConfig, mix_at_snr, resample
from .errors import AlignmentError, InvalidInput, VadError
from .evaluation import (
    ThresholdConfig, align_references, clip_tagging_report, decode_segments, evaluate_run, roc_points,
    sweep_thresholds,
)
from .features import iter_clip_features
from .file_exports import read_segments_tsv, save_as_json, save_report, save_roc_csv, save_segments_tsv, save_sweep_rows
from .layers import linear_softmax_pool
from .manifest import ManifestRow, clip_targets, label_vocabulary, read_manifest, write_manifest
from .model_io import load_model, save_model
from .seeding import derive_rng, derive_seed
from .train import FitResult, TrainConfig, TrainItem, fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    dsp: DspConfig = DspConfig()
    specaug: SpecAugConfig = SpecAugConfig()
    # CrnnConfig overrides; labels and output count come from the data
    model: Dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    distill: DistillConfig = DistillConfig()
    threshold: ThresholdConfig = ThresholdConfig()
    feature_cache: Optional[str] = None


def _features(rows, cfg: PipelineConfig, threads: int, desc: str):
    """Yield (row, spec) for readable clips, logging the others"""
    for row, spec in iter_clip_features(rows, cfg.dsp, threads, cfg.feature_cache, desc=desc):
        if isinstance(spec, Exception):
            logger.warning(f"Skipping unreadable clip {row.clip_id}: {spec}")
            continue
        yield row, spec


def _training_config(cfg: PipelineConfig, seed: int, threads: int, purpose: str) -> TrainConfig:
    return replace(cfg.train, seed=derive_seed(seed, purpose), threads=max(1, threads))


# ---------------------------------------------------------------- teacher

def build_clip_dataset(rows: Sequence[ManifestRow], labels: Sequence[str], cfg: PipelineConfig,
                       threads: int = 1) -> List[TrainItem]:
    targets = dict(zip((r.clip_id for r in rows), clip_targets(rows, labels)))
    return [
        TrainItem(clip_id=row.clip_id, features=spec.values.astype(np.float32), clip_target=targets[row.clip_id])
        for row, spec in _features(rows, cfg, threads, "teacher features")
    ]


def train_teacher(manifest_path: str, out_model: str, cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                  threads: int = 1, checkpoint_dir: Optional[str] = None,
                  resume_from: Optional[str] = None) -> FitResult:
    """Clip-level training: balanced sampling, SpecAug and time shift"""
    rows = read_manifest(manifest_path)
    labels = label_vocabulary(rows)
    dataset = build_clip_dataset(rows, labels, cfg, threads)
    model = Crnn(CrnnConfig.teacher(labels, **cfg.model), seed=derive_seed(seed, "teacher-init"))
    logger.info(f"Teacher vocabulary: {list(labels)}")

    result = fit(model, dataset, "clip", _training_config(cfg, seed, threads, "teacher"), cfg.specaug,
                 out_dir=checkpoint_dir or f"{out_model}.ckpt", resume_from=resume_from)
    save_model(model, out_model, extra_meta={"best_cv_loss": result.best_cv_loss, "role": "teacher"})
    return result


# ---------------------------------------------------------------- distillation

def distill_labels(teacher_path: str, manifest_path: str, out_archive: str, scheme: str = "soft",
                   cfg: PipelineConfig = PipelineConfig(), fraction: Optional[float] = None, seed: int = 0,
                   threads: int = 1) -> DistillSummary:
    teacher = load_model(teacher_path)
    rows = read_manifest(manifest_path, check_paths=False)
    distill_cfg = replace(cfg.distill, rng_seed=derive_seed(seed, "distill"))
    if fraction is not None:
        distill_cfg = replace(distill_cfg, dynamic_fraction=fraction)
    return distill_corpus(
        teacher, rows, out_archive, distill_cfg, scheme, cfg.dsp, threads,
        error_report_path=f"{out_archive}.errors.json", feature_cache=cfg.feature_cache,
    )


# ---------------------------------------------------------------- student

def build_frame_dataset(rows: Sequence[ManifestRow], targets_path: str, cfg: PipelineConfig,
                        threads: int = 1) -> List[TrainItem]:
    targets = load_targets(targets_path, [r.clip_id for r in rows])

    dataset, mismatched = [], []
    for row, spec in _features(rows, cfg, threads, "student features"):
        values = targets[row.clip_id].values
        if len(values) != spec.num_frames:
            mismatched.append(f"{row.clip_id} ({len(values)} targets vs {spec.num_frames} frames)")
            continue
        dataset.append(TrainItem(clip_id=row.clip_id, features=spec.values.astype(np.float32),
                                 frame_target=values.astype(np.float32)))
    if mismatched:
        raise AlignmentError("Target length differs from feature length", mismatched)
    return dataset


def train_student(manifest_path: str, targets_path: str, out_model: str, cfg: PipelineConfig = PipelineConfig(),
                  seed: int = 0, threads: int = 1, checkpoint_dir: Optional[str] = None,
                  resume_from: Optional[str] = None) -> FitResult:
    """Frame-level training on distilled (Speech, non-Speech) targets"""
    rows = read_manifest(manifest_path)
    dataset = build_frame_dataset(rows, targets_path, cfg, threads)
    overrides = {k: v for k, v in cfg.model.items() if k not in ("labels", "num_outputs")}
    model = Crnn(CrnnConfig(labels=STUDENT_LABELS, num_outputs=2, **overrides),
                 seed=derive_seed(seed, "student-init"))
    result = fit(model, dataset, "frame", _training_config(cfg, seed, threads, "student"), cfg.specaug,
                 out_dir=checkpoint_dir or f"{out_model}.ckpt", resume_from=resume_from)
    save_model(model, out_model, extra_meta={"best_cv_loss": result.best_cv_loss, "role": "student"})
    return result


# ---------------------------------------------------------------- inference

def speech_columns(model: Crnn, probs: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """(Speech, non-Speech) columns from any model: students directly, teachers pooled"""
    if tuple(l.lower() for l in model.config.labels) == tuple(l.lower() for l in STUDENT_LABELS):
        return probs
    distill_cfg = replace(cfg.distill, speech_event_index=model.config.speech_index())
    return pool_teacher_labels(FrameProbs(values=probs), distill_cfg).values


@dataclass
class InferenceOutput:
    probs_path: str
    segments_path: str
    clips: int


def infer(model_path: str, manifest_path: str, out_dir: str, cfg: PipelineConfig = PipelineConfig(),
          threads: int = 1) -> InferenceOutput:
    """Write per-clip speech probabilities (archive) and decoded segments (TSV)"""
    model = load_model(model_path)
    rows = read_manifest(manifest_path, check_paths=False)
    probs_path = os.path.join(out_dir, "probs.bin")
    segments = {}
    with ArchiveWriter(probs_path) as writer:
        for row, spec in _features(rows, cfg, threads, "infer"):
            probs = speech_columns(model, crnn_forward(spec, model).values, cfg).astype(np.float32)
            writer.append(row.clip_id, probs, PROBS_SCHEME)
            decoded = decode_segments(cfg.threshold.apply(probs[:, 0]), cfg.dsp.hop_s, row.clip_id)
            segments[row.clip_id] = decoded.segments
    segments_path = save_segments_tsv(segments, os.path.join(out_dir, "segments.tsv"))
    logger.info(f"Inference done for {len(segments)} clip(s) into {out_dir}")
    return InferenceOutput(probs_path, segments_path, len(segments))


def load_speech_probs(probs_path: str) -> Dict[str, np.ndarray]:
    return {clip_id: record.values[:, 0] for clip_id, record in read_archive(probs_path).items()}


# ---------------------------------------------------------------- scoring

def evaluate(probs_path: str, references_path: str, out_dir: Optional[str] = None,
             cfg: PipelineConfig = PipelineConfig()):
    probs = load_speech_probs(probs_path)
    refs = read_segments_tsv(references_path)
    report, points, segments = evaluate_run(probs, refs, cfg.threshold, cfg.dsp.hop_s)
    if out_dir:
        save_report(report, os.path.join(out_dir, "report.json"))
        save_roc_csv(points, os.path.join(out_dir, "roc.csv"))
        save_segments_tsv(segments, os.path.join(out_dir, "segments.tsv"))
    return report


def sweep(probs_path: str, references_path: str, thresholds: Sequence[float], out_path: Optional[str] = None,
          mode: str = "simple", cfg: PipelineConfig = PipelineConfig()) -> List[dict]:
    rows = sweep_thresholds(load_speech_probs(probs_path), read_segments_tsv(references_path), thresholds,
                            mode=mode, phi_hi=cfg.threshold.phi_hi, hop_s=cfg.dsp.hop_s)
    if out_path:
        save_sweep_rows(rows, out_path)
    return rows


def roc_export(probs_path: str, references_path: str, out_csv: str, cfg: PipelineConfig = PipelineConfig()) -> str:
    aligned = align_references(load_speech_probs(probs_path), read_segments_tsv(references_path), cfg.dsp.hop_s)
    scores = np.concatenate([a[0] for a in aligned.values()])
    flags = np.concatenate([a[1] for a in aligned.values()])
    return save_roc_csv(roc_points(scores, flags), out_csv)


def evaluate_tagging(model_path: str, manifest_path: str, out_path: Optional[str] = None,
                     cfg: PipelineConfig = PipelineConfig(), threads: int = 1) -> dict:
    """Clip-level mAP / AUC / d' of a model's linear-softmax pooled outputs"""
    model = load_model(model_path)
    rows = read_manifest(manifest_path, check_paths=False)
    scores, kept = [], []
    for row, spec in _features(rows, cfg, threads, "tagging"):
        frames = crnn_forward(spec, model).values.astype(np.float64)
        scores.append(linear_softmax_pool(frames[None])[0])
        kept.append(row)
    if not kept:
        raise InvalidInput("No readable clips to score")
    report = clip_tagging_report(np.stack(scores), clip_targets(kept, model.config.labels), model.config.labels)
    if out_path:
        save_as_json(report, out_path)
    return report


# ---------------------------------------------------------------- noise corruption

def mix_snr(manifest_path: str, noise_manifest_path: str, snrs_db: Sequence[float], out_dir: str,
            seed: int = 0) -> Dict[float, str]:
    """One noise-corrupted copy of the manifest per SNR; clip ids and labels are unchanged"""
    rows = read_manifest(manifest_path)
    noise_rows = read_manifest(noise_manifest_path)
    if not noise_rows:
        raise InvalidInput(f"Noise manifest {noise_manifest_path} is empty")
    noise_cache: Dict[str, AudioClip] = {}

    written = {}
    for snr in snrs_db:
        snr_dir = os.path.join(out_dir, f"snr_{snr:+g}dB")
        mixed_rows = []
        for row in rows:
            pick = noise_rows[int(derive_rng(seed, "noise-pick", row.clip_id, repr(float(snr))).integers(len(noise_rows)))]
            try:
                speech = read_audio(row.audio_path, clip_id=row.clip_id)
                if pick.clip_id not in noise_cache:
                    noise_cache[pick.clip_id] = read_audio(pick.audio_path, clip_id=pick.clip_id)
                noise = resample(noise_cache[pick.clip_id], speech.sample_rate)
                mixed = mix_at_snr(speech, noise, MixSpec(row.clip_id, pick.clip_id, float(snr),
                                                          derive_seed(seed, "mix", repr(float(snr)))))
            except VadError as e:
                logger.warning(f"Keeping {row.clip_id} clean at {snr:+g} dB: {e}")
                mixed = read_audio(row.audio_path, clip_id=row.clip_id)
            path = os.path.join(snr_dir, "audio", f"{row.clip_id}.wav")
            write_audio(mixed, path)
            mixed_rows.append(replace(row, audio_path=path))
        written[float(snr)] = write_manifest(mixed_rows, os.path.join(snr_dir, "manifest.tsv"))
        logger.info(f"Wrote {len(mixed_rows)} clip(s) mixed at {snr:+g} dB into {snr_dir}")
    return written
