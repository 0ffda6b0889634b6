# Utils package for the VAD toolkit
# Contains the audio front-end, the CRNN, training, distillation and scoring

from .audio_reader import AudioClip, read_audio, write_audio
from .dsp import DspConfig, LogMelSpec, MixSpec, SpecAugConfig, logmel, mix_at_snr, resample, spec_augment, time_shift
from .crnn import Crnn, CrnnConfig, FrameProbs, count_params, crnn_forward
from .model_io import load_model, save_model
from .train import TrainConfig, adam_step, balanced_sampler, bce, fit, plateau_scheduler
from .distill import DistillConfig, StudentTargets, distill_corpus, dynamize, harden, pool_teacher_labels
from .evaluation import (
    MetricsReport, ThresholdConfig, auc, d_prime, decode_segments, double_threshold, evaluate_run, event_f1,
    fa_miss, frame_metrics, mean_average_precision,
)
from .manifest import ManifestRow, read_manifest, write_manifest
from .toy_corpus import ToyCorpusSpec, synth_toy_corpus
from .cleanup import prune_checkpoints

__all__ = [
    'AudioClip',
    'read_audio',
    'write_audio',
    'DspConfig',
    'LogMelSpec',
    'MixSpec',
    'SpecAugConfig',
    'logmel',
    'mix_at_snr',
    'resample',
    'spec_augment',
    'time_shift',
    'Crnn',
    'CrnnConfig',
    'FrameProbs',
    'count_params',
    'crnn_forward',
    'load_model',
    'save_model',
    'TrainConfig',
    'adam_step',
    'balanced_sampler',
    'bce',
    'fit',
    'plateau_scheduler',
    'DistillConfig',
    'StudentTargets',
    'distill_corpus',
    'dynamize',
    'harden',
    'pool_teacher_labels',
    'MetricsReport',
    'ThresholdConfig',
    'auc',
    'd_prime',
    'decode_segments',
    'double_threshold',
    'evaluate_run',
    'event_f1',
    'fa_miss',
    'frame_metrics',
    'mean_average_precision',
    'ManifestRow',
    'read_manifest',
    'write_manifest',
    'ToyCorpusSpec',
    'synth_toy_corpus',
    'prune_checkpoints',
]
