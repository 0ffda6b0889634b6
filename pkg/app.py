#!/usr/bin/env python3
"""
Command line for the teacher -> student VAD pipeline.

    python app.py synth-toy --out data/toy
    python app.py train-teacher --manifest data/toy/manifest.tsv --out runs/teacher.gpvd
    python app.py distill-labels --model runs/teacher.gpvd --manifest ... --out runs/soft.lab
    python app.py train-student --manifest ... --labels runs/soft.lab --out runs/student.gpvd
    python app.py infer --model runs/student.gpvd --manifest ... --out runs/infer
    python app.py evaluate --probs runs/infer/probs.bin --labels data/toy/references.tsv --out runs/eval
"""

import os
import logging
from dataclasses import replace

import click

from config import Config, load_pipeline_config
from utils.errors import ValidationError, VadError
from utils.pipeline import (
    distill_labels, evaluate, evaluate_tagging, infer, mix_snr, roc_export, sweep, train_student, train_teacher,
)
from utils.toy_corpus import ToyCorpusSpec, synth_toy_corpus

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = "0.01,0.02,0.05,0.1,0.2,0.5,0.7"


class VadGroup(click.Group):
    """Maps library exceptions to exit codes: 2 for bad input, 1 for runtime failures"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ValidationError, FileNotFoundError) as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(2)
        except VadError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)


def common_options(func):
    func = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                        help='JSON file overriding dsp/specaug/model/train/distill/threshold defaults')(func)
    func = click.option('--threads', type=int, default=None, help='Worker threads (default: VAD_THREADS)')(func)
    func = click.option('--seed', type=click.IntRange(min=0), default=None, help='Root seed (default: VAD_SEED)')(func)
    return func


def _settings(seed, threads, config_path, epochs=None, cache=False):
    cfg = load_pipeline_config(config_path)
    if epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
    if cache:
        cfg = replace(cfg, feature_cache=os.path.join(Config.WORK_DIR, 'features'))
    return cfg, Config.SEED if seed is None else seed, Config.THREADS if threads is None else threads


def _floats(text: str):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma separated numbers, got {text!r}")


@click.group(cls=VadGroup)
@click.option('--log-level', default=None, help='Overrides VAD_LOG_LEVEL')
def cli(log_level):
    """Voice activity detection from clip-level supervision."""
    Config.init_app(log_level)


@cli.command('synth-toy')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--n-clips', type=int, default=20, show_default=True)
@click.option('--clip-dur', type=float, default=10.0, show_default=True)
@click.option('--speech-rate', type=float, default=2.0, show_default=True, help='Speech events per speech clip')
@click.option('--nonspeech-rate', type=float, default=1.0, show_default=True)
@click.option('--speech-clip-prob', type=float, default=0.5, show_default=True)
@click.option('--noise-per-kind', type=int, default=0, show_default=True, help='Noise bank clips per kind')
@click.option('--prefix', default='clip', show_default=True)
@click.option('--seed', type=click.IntRange(min=0), default=None)
def synth_toy(out, n_clips, clip_dur, speech_rate, nonspeech_rate, speech_clip_prob, noise_per_kind, prefix, seed):
    """Synthesise a toy corpus with exact frame references."""
    spec = ToyCorpusSpec(
        n_clips=n_clips, clip_dur_s=clip_dur, speech_event_rate=speech_rate, nonspeech_event_rate=nonspeech_rate,
        speech_clip_prob=speech_clip_prob, noise_clips_per_kind=noise_per_kind, prefix=prefix,
        seed=Config.SEED if seed is None else seed,
    )
    corpus = synth_toy_corpus(spec, out)
    click.echo(f"Manifest: {corpus.manifest_path}")
    click.echo(f"References: {corpus.references_path}")
    if corpus.noise_manifest_path:
        click.echo(f"Noise manifest: {corpus.noise_manifest_path}")


@cli.command('train-teacher')
@click.option('--manifest', required=True)
@click.option('--out', required=True, help='Model file to write')
@click.option('--epochs', type=int, default=None)
@click.option('--checkpoint-dir', default=None, help='Default: <out>.ckpt')
@click.option('--resume', default=None, help='Checkpoint file, or a directory to resume from its newest checkpoint')
@click.option('--cache-features', is_flag=True, help='Keep log-Mel dumps under VAD_WORK_DIR')
@common_options
def train_teacher_cmd(manifest, out, epochs, checkpoint_dir, resume, cache_features, seed, threads, config_path):
    """Clip-level training of the teacher."""
    cfg, seed, threads = _settings(seed, threads, config_path, epochs, cache_features)
    result = train_teacher(manifest, out, cfg, seed, threads, checkpoint_dir, resume)
    click.echo(f"Teacher saved to {out} (best cv loss {result.best_cv_loss:.4f} at step {result.best_step})")


@cli.command('distill-labels')
@click.option('--model', required=True, help='Teacher model file')
@click.option('--manifest', required=True)
@click.option('--out', required=True, help='Label archive to write')
@click.option('--scheme', type=click.Choice(['soft', 'hard', 'dynamic']), default='soft', show_default=True)
@click.option('--fraction', type=float, default=None, help='Share of speech frames hardened (dynamic)')
@click.option('--cache-features', is_flag=True)
@common_options
def distill_cmd(model, manifest, out, scheme, fraction, cache_features, seed, threads, config_path):
    """Estimate frame targets for the student with the teacher."""
    cfg, seed, threads = _settings(seed, threads, config_path, cache=cache_features)
    summary = distill_labels(model, manifest, out, scheme, cfg, fraction, seed, threads)
    click.echo(f"Wrote {summary.written} record(s) to {out}; skipped {len(summary.skipped)}")


@cli.command('train-student')
@click.option('--manifest', required=True)
@click.option('--labels', required=True, help='Label archive from distill-labels')
@click.option('--out', required=True, help='Model file to write')
@click.option('--epochs', type=int, default=None)
@click.option('--checkpoint-dir', default=None, help='Default: <out>.ckpt')
@click.option('--resume', default=None, help='Checkpoint file or directory')
@click.option('--cache-features', is_flag=True)
@common_options
def train_student_cmd(manifest, labels, out, epochs, checkpoint_dir, resume, cache_features, seed, threads,
                      config_path):
    """Frame-level training of the student on distilled targets."""
    cfg, seed, threads = _settings(seed, threads, config_path, epochs, cache_features)
    result = train_student(manifest, labels, out, cfg, seed, threads, checkpoint_dir, resume)
    click.echo(f"Student saved to {out} (best cv loss {result.best_cv_loss:.4f} at step {result.best_step})")


@cli.command('infer')
@click.option('--model', required=True)
@click.option('--manifest', required=True)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@common_options
def infer_cmd(model, manifest, out, seed, threads, config_path):
    """Speech probabilities and decoded segments for every clip."""
    cfg, _, threads = _settings(seed, threads, config_path)
    output = infer(model, manifest, out, cfg, threads)
    click.echo(f"Probabilities: {output.probs_path}")
    click.echo(f"Segments: {output.segments_path}")


@cli.command('evaluate')
@click.option('--probs', required=True, help='Probability archive from infer')
@click.option('--labels', required=True, help='Reference segments TSV')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@common_options
def evaluate_cmd(probs, labels, out, seed, threads, config_path):
    """Frame, score and event metrics of an inference run."""
    cfg, _, _ = _settings(seed, threads, config_path)
    report = evaluate(probs, labels, out, cfg)
    click.echo(f"F1 {report.f1:.2f}  FER {report.fer:.2f}  Event-F1 {report.event_f1:.2f}  "
               f"AUC {report.auc if report.auc is None else round(report.auc, 2)}")
    click.echo(f"Report: {os.path.join(out, 'report.json')}")


@cli.command('sweep-thresholds')
@click.option('--probs', required=True)
@click.option('--labels', required=True)
@click.option('--out', required=True, help='TSV with one row per threshold')
@click.option('--thresholds', default=DEFAULT_SWEEP, show_default=True)
@click.option('--mode', type=click.Choice(['simple', 'double']), default='simple', show_default=True)
@common_options
def sweep_cmd(probs, labels, out, thresholds, mode, seed, threads, config_path):
    """Metrics (incl. P_fa / P_miss) for each threshold."""
    cfg, _, _ = _settings(seed, threads, config_path)
    rows = sweep(probs, labels, _floats(thresholds), out, mode, cfg)
    click.echo(f"Wrote {len(rows)} row(s) to {out}")


@cli.command('roc-export')
@click.option('--probs', required=True)
@click.option('--labels', required=True)
@click.option('--out', required=True, help='CSV: threshold,tpr,fpr')
@common_options
def roc_cmd(probs, labels, out, seed, threads, config_path):
    """Frame-level ROC points as CSV."""
    cfg, _, _ = _settings(seed, threads, config_path)
    click.echo(f"ROC: {roc_export(probs, labels, out, cfg)}")


@cli.command('mix-snr')
@click.option('--manifest', required=True)
@click.option('--noise-manifest', required=True)
@click.option('--snr', 'snrs', default='20,15,10,5,0,-5', show_default=True, help='Comma separated dB values')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@common_options
def mix_snr_cmd(manifest, noise_manifest, snrs, out, seed, threads, config_path):
    """Noise-corrupted copies of a manifest, one per SNR."""
    _, seed, _ = _settings(seed, threads, config_path)
    for snr, path in mix_snr(manifest, noise_manifest, _floats(snrs), out, seed).items():
        click.echo(f"{snr:+g} dB: {path}")


@cli.command('evaluate-tagging')
@click.option('--model', required=True)
@click.option('--manifest', required=True)
@click.option('--out', default=None, help='JSON report')
@common_options
def evaluate_tagging_cmd(model, manifest, out, seed, threads, config_path):
    """Clip-level mAP, AUC and d' of a model."""
    cfg, _, threads = _settings(seed, threads, config_path)
    report = evaluate_tagging(model, manifest, out, cfg, threads)
    click.echo(f"mAP {report['map']:.2f}  AUC {report['auc']}  d' {report['d_prime']}")


if __name__ == '__main__':
    cli()
