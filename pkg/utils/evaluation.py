"""
Post-processing and scoring of speech probabilities.

Frame-level scores (macro P/R/F1, FER, P_fa/P_miss) come from confusion
counts pooled over all clips, AUC from one ROC over every frame of every
clip, and Event-F1 from one-to-one segment matching with an onset collar and
a duration-relative offset tolerance. Reported values are percentages.
"""

import math
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.stats import norm
from sklearn.metrics import average_precision_score, confusion_matrix, roc_auc_score, roc_curve

from .errors import AlignmentError, ConfigError, InvalidInput, UndefinedMetric

logger = logging.getLogger(__name__)

HOP_S = 0.020


@dataclass(frozen=True)
class ThresholdConfig:
    mode: str = "double"
    phi_low: float = 0.1
    phi_hi: float = 0.5
    phi: float = 0.5

    def __post_init__(self):
        if self.mode not in ("double", "simple"):
            raise ConfigError(f"threshold mode must be 'double' or 'simple', got {self.mode!r}")
        if self.phi_low > self.phi_hi:
            raise ConfigError(f"phi_low ({self.phi_low}) must not exceed phi_hi ({self.phi_hi})")

    def apply(self, speech_probs) -> np.ndarray:
        if self.mode == "simple":
            return simple_threshold(speech_probs, self.phi)
        return double_threshold(speech_probs, self.phi_low, self.phi_hi)


@dataclass
class SegmentList:
    segments: List[Tuple[float, float]] = field(default_factory=list)
    clip_id: str = ""

    def __post_init__(self):
        self.segments = [(float(a), float(b)) for a, b in self.segments]
        for (on, off), nxt in zip(self.segments, self.segments[1:] + [None]):
            if not on < off:
                raise InvalidInput(f"{self.clip_id}: segment onset {on} is not before offset {off}")
            if nxt is not None and nxt[0] < off:
                raise InvalidInput(f"{self.clip_id}: segments must be sorted and disjoint")

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class FrameScores:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    fer: float


@dataclass
class EventCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "EventCounts") -> "EventCounts":
        return EventCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def f1(self) -> float:
        denominator = 2 * self.tp + self.fp + self.fn
        # nothing predicted and nothing to find counts as perfect
        return 100.0 if denominator == 0 else 100.0 * 2 * self.tp / denominator


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    fer: float
    auc: Optional[float]
    event_f1: float
    p_fa: Optional[float]
    p_miss: Optional[float]
    map: Optional[float] = None
    d_prime: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- post-processing

def simple_threshold(speech_probs, phi: float = 0.5) -> np.ndarray:
    return (np.asarray(speech_probs) >= phi).astype(np.int8)


def double_threshold(speech_probs, phi_low: float = 0.1, phi_hi: float = 0.5) -> np.ndarray:
    """Grow every frame >= phi_hi into its maximal contiguous run of frames >= phi_low"""
    if phi_low > phi_hi:
        raise InvalidInput(f"phi_low ({phi_low}) must not exceed phi_hi ({phi_hi})")
    probs = np.asarray(speech_probs, dtype=np.float64)
    regions, count = ndimage.label(probs >= phi_low)
    if count == 0:
        return np.zeros(probs.shape, dtype=np.int8)
    seeded = np.unique(regions[probs >= phi_hi])
    return np.isin(regions, seeded[seeded > 0]).astype(np.int8)


def decode_segments(binary, hop_s: float = HOP_S, clip_id: str = "") -> SegmentList:
    """Maximal runs of ones -> (start * hop, (end + 1) * hop)"""
    flags = np.asarray(binary).astype(np.int8)
    edges = np.diff(np.concatenate(([0], flags, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return SegmentList([(s * hop_s, e * hop_s) for s, e in zip(starts, ends)], clip_id=clip_id)


def segments_to_frames(segments, num_frames: int, hop_s: float = HOP_S) -> np.ndarray:
    """Frame t is speech iff its centre (t + 0.5) * hop lies in [onset, offset)"""
    centres = (np.arange(num_frames) + 0.5) * hop_s
    frames = np.zeros(num_frames, dtype=np.int8)
    for onset, offset in segments:
        frames[(centres >= onset) & (centres < offset)] = 1
    return frames


# ---------------------------------------------------------------- frame metrics

def _check_pair(pred, ref):
    pred = np.asarray(pred).astype(np.int8).ravel()
    ref = np.asarray(ref).astype(np.int8).ravel()
    if pred.shape != ref.shape:
        raise InvalidInput(f"Prediction has {pred.size} frames, reference has {ref.size}")
    return pred, ref


def confusion_counts(pred, ref) -> ConfusionCounts:
    pred, ref = _check_pair(pred, ref)
    if pred.size == 0:
        return ConfusionCounts()
    (tn, fp), (fn, tp) = confusion_matrix(ref, pred, labels=[0, 1])
    return ConfusionCounts(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def _ratio(num: int, den: int, absent: float) -> float:
    return absent if den == 0 else num / den


def _class_scores(hits: int, false_alarms: int, misses: int):
    # a class neither present nor predicted is scored as perfect
    absent = 1.0 if hits + false_alarms + misses == 0 else 0.0
    p = _ratio(hits, hits + false_alarms, absent)
    r = _ratio(hits, hits + misses, absent)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def scores_from_counts(counts: ConfusionCounts) -> FrameScores:
    if counts.total == 0:
        raise InvalidInput("No frames to score")
    speech = _class_scores(counts.tp, counts.fp, counts.fn)
    non_speech = _class_scores(counts.tn, counts.fn, counts.fp)
    precision, recall, f1 = ((a + b) / 2 for a, b in zip(speech, non_speech))
    return FrameScores(
        counts=counts,
        precision=100.0 * precision,
        recall=100.0 * recall,
        f1=100.0 * f1,
        fer=100.0 * (counts.fp + counts.fn) / counts.total,
    )


def frame_metrics(pred, ref) -> FrameScores:
    """Macro (Speech / non-Speech) precision, recall and F1 plus frame error rate"""
    return scores_from_counts(confusion_counts(pred, ref))


def rates_from_counts(counts: ConfusionCounts) -> Tuple[Optional[float], Optional[float]]:
    p_fa = None if counts.fp + counts.tn == 0 else 100.0 * counts.fp / (counts.fp + counts.tn)
    p_miss = None if counts.tp + counts.fn == 0 else 100.0 * counts.fn / (counts.tp + counts.fn)
    return p_fa, p_miss


def fa_miss(pred, ref) -> Tuple[Optional[float], Optional[float]]:
    """(P_fa, P_miss) in percent; a rate whose class is absent from ref is None"""
    return rates_from_counts(confusion_counts(pred, ref))


# ---------------------------------------------------------------- score metrics

def _binary_labels(ref) -> np.ndarray:
    ref = np.asarray(ref).astype(np.int8).ravel()
    if ref.size == 0 or ref.min() == ref.max():
        raise UndefinedMetric("Reference contains a single class, ROC is undefined")
    return ref


def auc(speech_probs, ref) -> float:
    """Area under the ROC in [0, 1]; tied scores count half"""
    ref = _binary_labels(ref)
    return float(roc_auc_score(ref, np.asarray(speech_probs, dtype=np.float64).ravel()))


def roc_points(speech_probs, ref) -> List[Tuple[float, float, float]]:
    """(threshold, tpr, fpr) at every distinct score, highest threshold first"""
    ref = _binary_labels(ref)
    fpr, tpr, thresholds = roc_curve(ref, np.asarray(speech_probs, dtype=np.float64).ravel(),
                                     drop_intermediate=False)
    return [(float(t), float(tp), float(fp)) for t, tp, fp in zip(thresholds, tpr, fpr)]


def d_prime(auc_value: float) -> float:
    """sqrt(2) * inverse normal CDF of the AUC; +-inf at the ends"""
    if not 0.0 <= auc_value <= 1.0:
        raise InvalidInput(f"AUC must be in [0, 1], got {auc_value}")
    return float(math.sqrt(2.0) * norm.ppf(auc_value))


def mean_average_precision(clip_scores, clip_refs) -> float:
    """Mean over events with at least one positive of the per-event average precision, in percent"""
    scores = np.asarray(clip_scores, dtype=np.float64)
    refs = np.asarray(clip_refs).astype(np.int8)
    if scores.ndim == 1:
        # a single event
        scores, refs = scores[:, None], refs.reshape(-1, 1)
    if scores.shape != refs.shape:
        raise InvalidInput(f"scores {scores.shape} and references {refs.shape} differ in shape")

    per_event = []
    excluded = []
    for e in range(scores.shape[1]):
        if refs[:, e].sum() == 0:
            excluded.append(e)
            continue
        per_event.append(average_precision_score(refs[:, e], scores[:, e]))
    if excluded:
        logger.warning(f"Excluded {len(excluded)} event(s) with no positive clip from mAP: {excluded[:10]}")
    if not per_event:
        raise UndefinedMetric("No event has a positive clip")
    return 100.0 * float(np.mean(per_event))


def clip_tagging_report(clip_scores, clip_refs, labels: Optional[Sequence[str]] = None) -> dict:
    """Clip-level tagging quality: mAP, macro AUC over events with both classes, and d' of that AUC"""
    scores = np.asarray(clip_scores, dtype=np.float64)
    refs = np.asarray(clip_refs).astype(np.int8)
    aucs = {}
    for e in range(scores.shape[1]):
        try:
            aucs[e] = auc(scores[:, e], refs[:, e])
        except UndefinedMetric:
            continue
    macro_auc = float(np.mean(list(aucs.values()))) if aucs else None
    names = list(labels) if labels else [str(e) for e in range(scores.shape[1])]
    return {
        "map": mean_average_precision(scores, refs),
        "auc": None if macro_auc is None else 100.0 * macro_auc,
        "d_prime": None if macro_auc is None else d_prime(macro_auc),
        "events_scored": len(aucs),
        "per_event_auc": {names[e]: 100.0 * value for e, value in aucs.items()},
    }


# ---------------------------------------------------------------- event metrics

def segments_match(pred: Tuple[float, float], ref: Tuple[float, float],
                   t_collar: float = 0.200, dur_tol: float = 0.20) -> bool:
    onset_ok = abs(pred[0] - ref[0]) <= t_collar
    offset_ok = abs(pred[1] - ref[1]) <= max(t_collar, dur_tol * (ref[1] - ref[0]))
    return onset_ok and offset_ok


def event_counts(pred, ref, t_collar: float = 0.200, dur_tol: float = 0.20) -> EventCounts:
    """Greedy one-to-one matching: references in onset order each take the first free compatible prediction"""
    pred = list(pred)
    ref = list(ref)
    used = [False] * len(pred)
    tp = 0
    for r in ref:
        for i, p in enumerate(pred):
            if not used[i] and segments_match(p, r, t_collar, dur_tol):
                used[i] = True
                tp += 1
                break
    return EventCounts(tp=tp, fp=len(pred) - tp, fn=len(ref) - tp)


def event_f1(pred, ref, t_collar: float = 0.200, dur_tol: float = 0.20) -> Tuple[float, EventCounts]:
    counts = event_counts(pred, ref, t_collar, dur_tol)
    return counts.f1, counts


# ---------------------------------------------------------------- whole runs

RefLabels = Union[np.ndarray, Sequence[Tuple[float, float]]]


def _reference_pair(ref: RefLabels, num_frames: int, hop_s: float, clip_id: str):
    """(frame flags, segments) from either frame flags or a segment list"""
    if isinstance(ref, np.ndarray) and ref.ndim == 1 and ref.dtype.kind in "biuf" and len(ref) == num_frames:
        flags = ref.astype(np.int8)
        return flags, decode_segments(flags, hop_s, clip_id).segments
    segments = SegmentList(list(ref), clip_id=clip_id).segments
    return segments_to_frames(segments, num_frames, hop_s), segments


@dataclass
class ClipScores:
    counts: ConfusionCounts
    events: EventCounts
    segments: List[Tuple[float, float]]


def score_clip(speech_probs, ref_frames, ref_segments, cfg: ThresholdConfig, hop_s: float = HOP_S,
               clip_id: str = "") -> ClipScores:
    pred = cfg.apply(speech_probs)
    segments = decode_segments(pred, hop_s, clip_id).segments
    return ClipScores(
        counts=confusion_counts(pred, ref_frames),
        events=event_counts(segments, ref_segments),
        segments=segments,
    )


def align_references(probs: Mapping[str, np.ndarray], refs: Mapping[str, RefLabels], hop_s: float = HOP_S):
    """clip_id -> (probs, ref frames, ref segments); every predicted clip needs a reference"""
    missing = [clip_id for clip_id in probs if clip_id not in refs]
    if missing:
        raise AlignmentError("Predicted clips have no reference labels", missing)
    aligned = {}
    for clip_id, speech_probs in probs.items():
        speech_probs = np.asarray(speech_probs, dtype=np.float64).ravel()
        frames, segments = _reference_pair(refs[clip_id], len(speech_probs), hop_s, clip_id)
        aligned[clip_id] = (speech_probs, frames, segments)
    return aligned


def _report_from(aligned, cfg: ThresholdConfig, hop_s: float, roc_auc: Optional[float],
                 frame_ap: Optional[float]) -> Tuple[MetricsReport, Dict[str, list]]:
    counts = ConfusionCounts()
    events = EventCounts()
    segments = {}
    for clip_id, (speech_probs, frames, ref_segments) in aligned.items():
        clip = score_clip(speech_probs, frames, ref_segments, cfg, hop_s, clip_id)
        counts = counts + clip.counts
        events = events + clip.events
        segments[clip_id] = clip.segments
    scores = scores_from_counts(counts)
    p_fa, p_miss = rates_from_counts(counts)
    report = MetricsReport(
        precision=scores.precision, recall=scores.recall, f1=scores.f1, fer=scores.fer,
        auc=None if roc_auc is None else 100.0 * roc_auc,
        event_f1=events.f1, p_fa=p_fa, p_miss=p_miss, map=frame_ap,
        d_prime=None if roc_auc is None else d_prime(roc_auc),
    )
    return report, segments


def _pooled_scores(aligned):
    probs = np.concatenate([a[0] for a in aligned.values()])
    frames = np.concatenate([a[1] for a in aligned.values()])
    try:
        return auc(probs, frames), roc_points(probs, frames), mean_average_precision(probs[:, None], frames[:, None])
    except UndefinedMetric as e:
        logger.warning(f"AUC left empty: {e}")
        return None, [], None


def evaluate_run(probs: Mapping[str, np.ndarray], refs: Mapping[str, RefLabels],
                 cfg: ThresholdConfig = ThresholdConfig(), hop_s: float = HOP_S):
    """Score every predicted clip against its reference.

    Returns (MetricsReport, ROC points, predicted segments per clip).
    """
    if not probs:
        raise InvalidInput("No predicted clips to evaluate")
    aligned = align_references(probs, refs, hop_s)
    roc_auc, points, frame_ap = _pooled_scores(aligned)
    report, segments = _report_from(aligned, cfg, hop_s, roc_auc, frame_ap)
    logger.info(f"Evaluated {len(aligned)} clip(s): F1 {report.f1:.2f}, FER {report.fer:.2f}, "
                f"Event-F1 {report.event_f1:.2f}")
    return report, points, segments


def sweep_thresholds(probs: Mapping[str, np.ndarray], refs: Mapping[str, RefLabels],
                     thresholds: Sequence[float], mode: str = "simple", phi_hi: float = 0.5,
                     hop_s: float = HOP_S) -> List[dict]:
    """One report row per threshold; under mode 'double' the threshold is phi_low and phi_hi stays fixed"""
    aligned = align_references(probs, refs, hop_s)
    roc_auc, _, frame_ap = _pooled_scores(aligned)
    rows = []
    for phi in thresholds:
        if mode == "simple":
            cfg = ThresholdConfig(mode="simple", phi=phi, phi_low=min(phi, phi_hi), phi_hi=max(phi, phi_hi))
        else:
            cfg = ThresholdConfig(mode="double", phi_low=phi, phi_hi=max(phi, phi_hi))
        report, _ = _report_from(aligned, cfg, hop_s, roc_auc, frame_ap)
        rows.append({"threshold": float(phi), **report.to_dict()})
    return rows
