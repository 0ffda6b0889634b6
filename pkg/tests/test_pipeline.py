import os
from dataclasses import replace

import numpy as np
import pytest

from utils.archives import ArchiveWriter, PROBS_SCHEME, read_archive
from utils.distill import harden, load_targets
from utils.errors import AlignmentError
from utils.file_exports import read_roc_csv, read_segments_tsv
from utils.manifest import label_vocabulary, read_manifest, write_manifest
from utils.model_io import load_model
from utils.pipeline import (
    PipelineConfig, distill_labels, evaluate, evaluate_tagging, infer, mix_snr, roc_export,
    sweep, train_student, train_teacher,
)
from utils.toy_corpus import ToyCorpusSpec, synth_toy_corpus
from utils.train import TrainConfig

TINY_MODEL = {"block_channels": (2, 2, 2), "convs_per_block": (1, 1, 1), "gru_hidden": 4}


@pytest.fixture
def quick_cfg():
    return replace(PipelineConfig(), model=dict(TINY_MODEL), train=TrainConfig(epochs=1, batch_size=4))


def _oracle_probs(corpus, path):
    with ArchiveWriter(path) as writer:
        for row in corpus.rows:
            flags = np.load(row.frame_labels).astype(np.float32)
            writer.append(row.clip_id, np.stack([flags, 1.0 - flags], axis=1), PROBS_SCHEME)
    return path


def test_teacher_to_report(toy_corpus, tmp_path, quick_cfg):
    teacher_path = str(tmp_path / "teacher.gpvd")
    result = train_teacher(toy_corpus.manifest_path, teacher_path, quick_cfg, seed=1)
    teacher = load_model(teacher_path)
    assert teacher.config.labels == label_vocabulary(toy_corpus.rows)
    assert "Speech" in teacher.config.labels
    assert os.path.exists(os.path.join(f"{teacher_path}.ckpt", "train_log.jsonl"))
    assert np.isfinite(result.best_cv_loss)

    soft_path = str(tmp_path / "soft.lab")
    summary = distill_labels(teacher_path, toy_corpus.manifest_path, soft_path, "soft", quick_cfg, seed=1)
    assert summary.written == len(toy_corpus.rows)

    student_path = str(tmp_path / "student.gpvd")
    train_student(toy_corpus.manifest_path, soft_path, student_path, quick_cfg, seed=1)
    assert load_model(student_path).config.labels == ("Speech", "non-Speech")

    output = infer(student_path, toy_corpus.manifest_path, str(tmp_path / "infer"), quick_cfg)
    assert output.clips == len(toy_corpus.rows)
    assert set(read_segments_tsv(output.segments_path)) == {r.clip_id for r in toy_corpus.rows}

    report = evaluate(output.probs_path, toy_corpus.references_path, str(tmp_path / "eval"), quick_cfg)
    for key, value in report.to_dict().items():
        assert value is not None, key
    assert os.path.exists(tmp_path / "eval" / "report.json")
    assert read_roc_csv(str(tmp_path / "eval" / "roc.csv"))


def test_teacher_models_can_be_scored_directly(toy_corpus, tmp_path, quick_cfg):
    teacher_path = str(tmp_path / "teacher.gpvd")
    train_teacher(toy_corpus.manifest_path, teacher_path, quick_cfg, seed=2)
    output = infer(teacher_path, toy_corpus.manifest_path, str(tmp_path / "infer"), quick_cfg)
    probs = read_archive(output.probs_path)
    assert all(record.values.shape == (100, 2) for record in probs.values())
    tagging = evaluate_tagging(teacher_path, toy_corpus.manifest_path, str(tmp_path / "tagging.json"), quick_cfg)
    assert 0.0 <= tagging["map"] <= 100.0
    assert set(tagging["per_event_auc"]) <= {"Noise", "Speech", "Tone"}


def test_hard_archive_is_hardened_soft_archive(toy_corpus, tmp_path, quick_cfg):
    teacher_path = str(tmp_path / "teacher.gpvd")
    train_teacher(toy_corpus.manifest_path, teacher_path, quick_cfg, seed=3)
    soft = distill_labels(teacher_path, toy_corpus.manifest_path, str(tmp_path / "soft.lab"), "soft", quick_cfg)
    hard = distill_labels(teacher_path, toy_corpus.manifest_path, str(tmp_path / "hard.lab"), "hard", quick_cfg)
    assert soft.written == hard.written
    soft_targets = load_targets(str(tmp_path / "soft.lab"))
    hard_targets = load_targets(str(tmp_path / "hard.lab"))
    for clip_id, targets in soft_targets.items():
        np.testing.assert_array_equal(hard_targets[clip_id].values, harden(targets).values)


def test_inference_is_repeatable(toy_corpus, tmp_path, quick_cfg):
    teacher_path = str(tmp_path / "teacher.gpvd")
    train_teacher(toy_corpus.manifest_path, teacher_path, quick_cfg, seed=4)
    a = infer(teacher_path, toy_corpus.manifest_path, str(tmp_path / "a"), quick_cfg)
    b = infer(teacher_path, toy_corpus.manifest_path, str(tmp_path / "b"), quick_cfg)
    assert open(a.probs_path, "rb").read() == open(b.probs_path, "rb").read()
    assert open(a.segments_path).read() == open(b.segments_path).read()


def test_student_needs_targets_for_every_clip(toy_corpus, tmp_path, quick_cfg):
    teacher_path = str(tmp_path / "teacher.gpvd")
    train_teacher(toy_corpus.manifest_path, teacher_path, quick_cfg, seed=5)
    partial_path = write_manifest(toy_corpus.rows[:2], str(tmp_path / "partial.tsv"))
    labels = str(tmp_path / "partial.lab")
    distill_labels(teacher_path, partial_path, labels, "soft", quick_cfg)
    with pytest.raises(AlignmentError):
        train_student(toy_corpus.manifest_path, labels, str(tmp_path / "student.gpvd"), quick_cfg)


def test_sweep_on_perfect_probabilities(toy_corpus, tmp_path):
    probs_path = _oracle_probs(toy_corpus, str(tmp_path / "probs.bin"))
    rows = sweep(probs_path, toy_corpus.references_path, [0.1, 0.5], str(tmp_path / "sweep.tsv"))
    assert [row["threshold"] for row in rows] == [0.1, 0.5]
    assert all(row["fer"] <= 0.1 for row in rows)
    assert len(open(tmp_path / "sweep.tsv").read().splitlines()) == 3
    report = evaluate(probs_path, toy_corpus.references_path)
    assert report.event_f1 == 100.0


def test_roc_export(toy_corpus, tmp_path):
    probs_path = _oracle_probs(toy_corpus, str(tmp_path / "probs.bin"))
    points = read_roc_csv(roc_export(probs_path, toy_corpus.references_path, str(tmp_path / "roc.csv")))
    assert points[-1][1:] == (1.0, 1.0)


def test_probabilities_without_reference_fail(toy_corpus, tmp_path):
    probs_path = str(tmp_path / "probs.bin")
    with ArchiveWriter(probs_path) as writer:
        writer.append("stranger", np.zeros((10, 2)), PROBS_SCHEME)
    with pytest.raises(AlignmentError) as excinfo:
        evaluate(probs_path, toy_corpus.references_path)
    assert "stranger" in str(excinfo.value)


def test_mix_snr_keeps_ids_and_labels(tmp_path):
    spec = ToyCorpusSpec(n_clips=3, clip_dur_s=1.0, min_event_s=0.3, max_event_s=0.6, noise_clips_per_kind=1,
                         seed=9)
    corpus = synth_toy_corpus(spec, str(tmp_path / "toy"))
    written = mix_snr(corpus.manifest_path, corpus.noise_manifest_path, [20.0, -5.0], str(tmp_path / "mixed"),
                      seed=9)
    assert sorted(written) == [-5.0, 20.0]
    clean = read_manifest(corpus.manifest_path)
    for path in written.values():
        mixed = read_manifest(path)
        assert [(r.clip_id, r.clip_labels, r.frame_labels) for r in mixed] == \
               [(r.clip_id, r.clip_labels, r.frame_labels) for r in clean]
        assert all(r.audio_path != c.audio_path for r, c in zip(mixed, clean))
    again = mix_snr(corpus.manifest_path, corpus.noise_manifest_path, [20.0], str(tmp_path / "again"), seed=9)
    first = read_manifest(written[20.0])[0].audio_path
    second = read_manifest(again[20.0])[0].audio_path
    assert open(first, "rb").read() == open(second, "rb").read()


# ---------------------------------------------------------------- desk-scale reproduction

@pytest.mark.slow
def test_student_matches_or_beats_teacher_on_toy_corpus(tmp_path):
    cfg = PipelineConfig()
    train = synth_toy_corpus(ToyCorpusSpec(n_clips=200, prefix="train", seed=101), str(tmp_path / "train"))
    held_out = synth_toy_corpus(ToyCorpusSpec(n_clips=50, prefix="eval", noise_clips_per_kind=4, seed=202),
                                str(tmp_path / "eval"))
    teacher_path = str(tmp_path / "teacher.gpvd")
    student_path = str(tmp_path / "student.gpvd")
    labels_path = str(tmp_path / "soft.lab")
    train_teacher(train.manifest_path, teacher_path, cfg, seed=1, threads=4)
    distill_labels(teacher_path, train.manifest_path, labels_path, "soft", cfg, seed=1, threads=4)
    train_student(train.manifest_path, labels_path, student_path, cfg, seed=1, threads=4)

    noisy_manifest = mix_snr(held_out.manifest_path, held_out.noise_manifest_path, [0.0, 60.0],
                             str(tmp_path / "noisy"), seed=1)
    scores = {}
    for name, model_path in (("teacher", teacher_path), ("student", student_path)):
        for condition, manifest in (("clean", held_out.manifest_path), ("noisy", noisy_manifest[0.0]),
                                    ("near_clean", noisy_manifest[60.0])):
            out = infer(model_path, manifest, str(tmp_path / name / condition), cfg, threads=4)
            scores[name, condition] = evaluate(out.probs_path, held_out.references_path, cfg=cfg)

    teacher, student = scores["teacher", "clean"], scores["student", "clean"]
    assert teacher.auc >= 90.0
    assert student.auc >= teacher.auc - 2.0
    assert student.event_f1 >= teacher.event_f1
    teacher_drop = scores["teacher", "noisy"].fer - teacher.fer
    student_drop = scores["student", "noisy"].fer - student.fer
    assert student_drop < teacher_drop + 5.0
    assert abs(scores["student", "near_clean"].fer - student.fer) <= 0.5
