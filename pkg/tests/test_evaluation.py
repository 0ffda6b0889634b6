import math

import numpy as np
import pytest

from utils.errors import AlignmentError, ConfigError, InvalidInput, UndefinedMetric
from utils.evaluation import (
    ConfusionCounts, SegmentList, ThresholdConfig, auc, clip_tagging_report, confusion_counts, d_prime,
    decode_segments, double_threshold, evaluate_run, event_counts, event_f1, fa_miss, frame_metrics,
    mean_average_precision, roc_points, scores_from_counts, segments_to_frames, simple_threshold,
    sweep_thresholds,
)


# ---------------------------------------------------------------- thresholds

def test_double_threshold_grows_seeds():
    out = double_threshold([0.05, 0.2, 0.6, 0.3, 0.05], 0.1, 0.5)
    np.testing.assert_array_equal(out, [0, 1, 1, 1, 0])


def test_double_threshold_unseeded_region_is_dropped():
    out = double_threshold([0.3, 0.3, 0.0, 0.2, 0.7, 0.2], 0.1, 0.5)
    np.testing.assert_array_equal(out, [0, 0, 0, 1, 1, 1])


def test_double_threshold_all_below_low():
    assert not double_threshold(np.full(20, 0.05), 0.1, 0.5).any()


def test_double_threshold_rejects_inverted_pair():
    with pytest.raises(InvalidInput):
        double_threshold([0.5], 0.6, 0.4)


@pytest.mark.parametrize("seed", range(20))
def test_equal_thresholds_match_simple_threshold(seed):
    probs = np.random.default_rng(seed).uniform(0, 1, 200)
    phi = float(np.random.default_rng(seed + 100).uniform(0.05, 0.95))
    np.testing.assert_array_equal(double_threshold(probs, phi, phi), simple_threshold(probs, phi))


@pytest.mark.parametrize("seed", range(20))
def test_raising_thresholds_never_adds_positives(seed):
    r = np.random.default_rng(seed)
    probs = r.uniform(0, 1, 300)
    low, hi = sorted(r.uniform(0, 1, 2))
    base = double_threshold(probs, low, hi)
    raised_hi = double_threshold(probs, low, min(1.0, hi + 0.1))
    raised_low = double_threshold(probs, min(hi, low + 0.1), hi)
    assert np.all(raised_hi <= base)
    assert np.all(raised_low <= base)


def test_threshold_config_validation_and_dispatch():
    with pytest.raises(ConfigError):
        ThresholdConfig(phi_low=0.6, phi_hi=0.5)
    with pytest.raises(ConfigError):
        ThresholdConfig(mode="triple")
    probs = [0.05, 0.2, 0.6, 0.3, 0.05]
    np.testing.assert_array_equal(ThresholdConfig().apply(probs), [0, 1, 1, 1, 0])
    np.testing.assert_array_equal(ThresholdConfig(mode="simple", phi=0.5).apply(probs), [0, 0, 1, 0, 0])


# ---------------------------------------------------------------- segments

def test_decode_all_zeros_is_empty():
    assert len(decode_segments(np.zeros(10))) == 0


def test_decode_runs():
    segments = decode_segments([1, 1, 0, 1]).segments
    assert segments == [pytest.approx((0.00, 0.04)), pytest.approx((0.06, 0.08))]


def test_decode_single_run():
    assert decode_segments(np.ones(5)).segments == [pytest.approx((0.0, 0.10))]


def test_segments_to_frames_inverts_decode(rng):
    flags = (rng.uniform(0, 1, 120) > 0.6).astype(np.int8)
    segments = decode_segments(flags).segments
    np.testing.assert_array_equal(segments_to_frames(segments, 120), flags)


def test_segment_list_validation():
    with pytest.raises(InvalidInput):
        SegmentList([(0.5, 0.5)])
    with pytest.raises(InvalidInput):
        SegmentList([(0.0, 1.0), (0.5, 2.0)])
    assert len(SegmentList([(0.0, 1.0), (1.0, 2.0)])) == 2


# ---------------------------------------------------------------- frame metrics

def test_perfect_prediction(rng):
    ref = (rng.uniform(0, 1, 100) > 0.5).astype(int)
    scores = frame_metrics(ref, ref)
    assert (scores.precision, scores.recall, scores.f1, scores.fer) == (100.0, 100.0, 100.0, 0.0)


def test_inverted_prediction():
    ref = np.array([1, 0] * 50)
    scores = frame_metrics(1 - ref, ref)
    assert scores.fer == 100.0
    assert scores.f1 == 0.0


def test_hand_counted_example():
    scores = frame_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    assert scores.counts == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)
    assert scores.precision == pytest.approx(50.0)
    assert scores.recall == pytest.approx(50.0)
    assert scores.f1 == pytest.approx(50.0)
    assert scores.fer == pytest.approx(50.0)


def test_length_mismatch_raises():
    with pytest.raises(InvalidInput):
        frame_metrics([1, 0], [1, 0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_counts_sum_and_fer_is_error_rate(seed):
    r = np.random.default_rng(seed)
    pred = r.integers(0, 2, 77)
    ref = r.integers(0, 2, 77)
    scores = frame_metrics(pred, ref)
    assert scores.counts.total == 77
    assert scores.fer == pytest.approx(100.0 - 100.0 * np.mean(pred == ref))


def test_absent_class_scores_as_perfect():
    scores = frame_metrics(np.ones(8), np.ones(8))
    assert scores.f1 == 100.0


def test_counts_add():
    total = confusion_counts([1, 0], [1, 1]) + confusion_counts([1, 0], [0, 0])
    assert total == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)
    with pytest.raises(InvalidInput):
        scores_from_counts(ConfusionCounts())


# ---------------------------------------------------------------- false alarm / miss

def test_fa_miss_examples():
    assert fa_miss([1, 0, 1, 0], [1, 0, 1, 0]) == (0.0, 0.0)
    assert fa_miss([1, 1, 1, 1], [1, 0, 1, 0]) == (100.0, 0.0)
    assert fa_miss([1, 0, 0, 1], [1, 1, 0, 0]) == (50.0, 50.0)


def test_fa_miss_absent_class_is_none():
    assert fa_miss([1, 0], [1, 1]) == (None, 50.0)
    assert fa_miss([1, 0], [0, 0]) == (50.0, None)


# ---------------------------------------------------------------- score metrics

def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc(np.full(6, 0.3), [0, 1, 0, 1, 0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetric):
        auc([0.1, 0.9], [1, 1])


@pytest.mark.parametrize("transform", [np.exp, lambda x: x ** 3, lambda x: 10 * x - 4])
def test_auc_is_invariant_under_increasing_transforms(rng, transform):
    scores = rng.uniform(0, 1, 500)
    ref = (rng.uniform(0, 1, 500) < scores).astype(int)
    assert auc(transform(scores), ref) == pytest.approx(auc(scores, ref), abs=1e-12)


def test_auc_matches_pair_counting(rng):
    scores = np.round(rng.uniform(0, 1, 60), 1)
    ref = rng.integers(0, 2, 60)
    pos, neg = scores[ref == 1], scores[ref == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert auc(scores, ref) == pytest.approx(wins / (len(pos) * len(neg)))


def test_roc_points_end_at_one_one():
    points = roc_points([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    thresholds = [t for t, _, _ in points]
    assert thresholds == sorted(thresholds, reverse=True)
    assert points[-1][1:] == (1.0, 1.0)


def test_d_prime_examples():
    assert d_prime(0.5) == 0.0
    assert d_prime(0.885) == pytest.approx(1.698, abs=0.005)
    assert d_prime(0.929) == pytest.approx(2.080, abs=0.005)
    assert d_prime(1.0) == math.inf
    assert d_prime(0.0) == -math.inf


@pytest.mark.parametrize("value", [0.01, 0.2, 0.4, 0.6, 0.77, 0.999])
def test_d_prime_is_odd_around_half(value):
    assert d_prime(value) + d_prime(1 - value) == pytest.approx(0.0, abs=1e-6)


def test_d_prime_rejects_out_of_range():
    with pytest.raises(InvalidInput):
        d_prime(1.2)


def test_map_examples():
    refs = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    assert mean_average_precision(refs.astype(float), refs) == pytest.approx(100.0)
    assert mean_average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(100.0 * (1 + 2 / 3) / 2)


def test_map_random_scores_near_prevalence():
    r = np.random.default_rng(5)
    refs = np.zeros(1000, dtype=int)
    refs[r.permutation(1000)[:500]] = 1
    assert mean_average_precision(r.uniform(0, 1, 1000), refs) == pytest.approx(50.0, abs=5.0)


def test_map_excludes_events_without_positives(caplog):
    scores = np.array([[0.9, 0.2], [0.1, 0.7]])
    refs = np.array([[1, 0], [0, 0]])
    assert mean_average_precision(scores, refs) == pytest.approx(100.0)
    assert "Excluded 1 event" in caplog.text
    with pytest.raises(UndefinedMetric):
        mean_average_precision(scores, np.zeros((2, 2)))


def test_clip_tagging_report():
    refs = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    report = clip_tagging_report(refs.astype(float), refs, labels=["Speech", "Dog"])
    assert report["map"] == pytest.approx(100.0)
    assert report["auc"] == pytest.approx(100.0)
    assert report["per_event_auc"] == {"Speech": 100.0, "Dog": 100.0}
    assert report["events_scored"] == 2


# ---------------------------------------------------------------- event metrics

def test_event_f1_identical():
    segments = [(0.0, 1.0), (2.0, 3.5)]
    f1, counts = event_f1(segments, segments)
    assert f1 == 100.0
    assert (counts.tp, counts.fp, counts.fn) == (2, 0, 0)


def test_event_f1_within_collar():
    assert event_f1([(0.0, 1.0)], [(0.10, 1.05)])[0] == 100.0


def test_event_f1_disjoint():
    f1, counts = event_f1([(0.0, 0.3)], [(1.0, 1.3)])
    assert f1 == 0.0
    assert (counts.tp, counts.fp, counts.fn) == (0, 1, 1)


def test_offset_tolerance_scales_with_reference_duration():
    # 20% of a 5 s reference allows a 1 s offset error
    assert event_f1([(0.0, 5.9)], [(0.0, 5.0)])[0] == 100.0
    assert event_f1([(0.0, 6.1)], [(0.0, 5.0)])[0] == 0.0


def test_each_prediction_matches_once():
    counts = event_counts([(0.0, 1.0)], [(0.0, 1.0), (0.05, 1.05)])
    assert (counts.tp, counts.fp, counts.fn) == (1, 0, 1)


def test_empty_lists_are_perfect():
    assert event_f1([], [])[0] == 100.0


def _separated_segments(r, n):
    starts = np.cumsum(r.uniform(1.5, 3.0, n))
    return [(float(s), float(s + r.uniform(0.5, 1.2))) for s in starts]


@pytest.mark.parametrize("seed", range(30))
def test_event_f1_is_symmetric(seed):
    r = np.random.default_rng(seed)
    ref = _separated_segments(r, int(r.integers(1, 8)))
    pred = [(on + r.uniform(-0.3, 0.3), off + r.uniform(-0.3, 0.3)) for on, off in ref if r.uniform() < 0.8]
    forward_f1, forward = event_f1(pred, ref, dur_tol=0.0)
    backward_f1, backward = event_f1(ref, pred, dur_tol=0.0)
    assert forward_f1 == pytest.approx(backward_f1)
    assert (forward.fp, forward.fn) == (backward.fn, backward.fp)


# ---------------------------------------------------------------- whole runs

def _run(rng, clips=4, frames=150):
    refs = {f"c{i}": (rng.uniform(0, 1, frames) > 0.5).astype(np.int8) for i in range(clips)}
    probs = {k: np.clip(v * 0.7 + rng.uniform(0, 0.3, frames), 0, 1) for k, v in refs.items()}
    return probs, refs


def test_indicator_probabilities_score_perfectly(rng):
    _, refs = _run(rng)
    report, points, segments = evaluate_run({k: v.astype(float) for k, v in refs.items()}, refs)
    assert report.f1 >= 99.9
    assert report.fer <= 0.1
    assert report.auc == pytest.approx(100.0)
    assert report.event_f1 == 100.0
    assert set(segments) == set(refs)
    assert points


def test_constant_half_marks_everything_speech(rng):
    _, refs = _run(rng)
    probs = {k: np.full(len(v), 0.5) for k, v in refs.items()}
    report, _, _ = evaluate_run(probs, refs, ThresholdConfig(mode="simple", phi=0.5))
    prevalence = 1.0 - np.mean(np.concatenate(list(refs.values())))
    assert report.fer == pytest.approx(100.0 * prevalence)
    assert report.p_fa == 100.0
    assert report.p_miss == 0.0
    assert report.auc == pytest.approx(50.0)


def test_global_report_equals_per_clip_recomputation(rng):
    probs, refs = _run(rng, clips=6)
    cfg = ThresholdConfig()
    report, _, _ = evaluate_run(probs, refs, cfg)
    counts = ConfusionCounts()
    tp = fp = fn = 0
    for clip_id, ref in refs.items():
        pred = cfg.apply(probs[clip_id])
        counts = counts + confusion_counts(pred, ref)
        events = event_counts(decode_segments(pred).segments, decode_segments(ref).segments)
        tp, fp, fn = tp + events.tp, fp + events.fp, fn + events.fn
    oracle = frame_metrics(
        np.concatenate([cfg.apply(probs[k]) for k in refs]), np.concatenate(list(refs.values())))
    assert report.f1 == pytest.approx(oracle.f1, abs=1e-9)
    assert report.fer == pytest.approx(100.0 * (counts.fp + counts.fn) / counts.total, abs=1e-9)
    assert report.event_f1 == pytest.approx(100.0 * 2 * tp / (2 * tp + fp + fn), abs=1e-9)
    pooled = auc(np.concatenate([probs[k] for k in refs]), np.concatenate(list(refs.values())))
    assert report.auc == pytest.approx(100.0 * pooled, abs=1e-9)
    assert report.d_prime == pytest.approx(d_prime(pooled))


def test_segment_references_are_accepted(rng):
    probs = {"a": np.array([0.9] * 10 + [0.0] * 10)}
    report, _, _ = evaluate_run(probs, {"a": [(0.0, 0.2)]})
    assert report.fer == 0.0
    assert report.event_f1 == 100.0


def test_missing_reference_raises(rng):
    probs, refs = _run(rng)
    del refs["c1"]
    with pytest.raises(AlignmentError):
        evaluate_run(probs, refs)


def test_no_clips_raises():
    with pytest.raises(InvalidInput):
        evaluate_run({}, {})


def test_single_class_reference_leaves_auc_empty():
    report, points, _ = evaluate_run({"a": np.full(10, 0.9)}, {"a": np.ones(10, dtype=np.int8)})
    assert report.auc is None
    assert report.d_prime is None
    assert report.p_fa is None
    assert points == []


def test_report_values_are_percentages(rng):
    probs, refs = _run(rng)
    report = evaluate_run(probs, refs)[0].to_dict()
    for key, value in report.items():
        if key != "d_prime" and value is not None:
            assert 0.0 <= value <= 100.0


def test_sweep_rows(rng):
    probs, refs = _run(rng)
    rows = sweep_thresholds(probs, refs, [0.1, 0.5, 0.9])
    assert [row["threshold"] for row in rows] == [0.1, 0.5, 0.9]
    fers = [row["fer"] for row in rows]
    direct = evaluate_run(probs, refs, ThresholdConfig(mode="simple", phi=0.5))[0]
    assert fers[1] == pytest.approx(direct.fer)
    double = sweep_thresholds(probs, refs, [0.2], mode="double", phi_hi=0.6)
    assert double[0]["fer"] == pytest.approx(
        evaluate_run(probs, refs, ThresholdConfig(phi_low=0.2, phi_hi=0.6))[0].fer)


# ---------------------------------------------------------------- brute-force oracles

def _random_segments(r, max_count=5, span=3.0):
    k = int(r.integers(0, max_count + 1))
    edges = np.sort(r.uniform(0.0, span, 2 * k))
    return [(float(edges[2 * i]), float(edges[2 * i + 1])) for i in range(k)]


def _compatible(p, ref, collar=0.200, tol=0.20):
    return abs(p[0] - ref[0]) <= collar and abs(p[1] - ref[1]) <= max(collar, tol * (ref[1] - ref[0]))


def _max_matching(pred, ref, i=0, used=frozenset()):
    if i == len(ref):
        return 0
    best = _max_matching(pred, ref, i + 1, used)
    for j, p in enumerate(pred):
        if j not in used and _compatible(p, ref[i]):
            best = max(best, 1 + _max_matching(pred, ref, i + 1, used | {j}))
    return best


def _seed_and_grow(probs, low, hi):
    out = [0] * len(probs)
    for t, p in enumerate(probs):
        if p >= hi:
            a = t
            while a > 0 and probs[a - 1] >= low:
                a -= 1
            b = t
            while b + 1 < len(probs) and probs[b + 1] >= low:
                b += 1
            for k in range(a, b + 1):
                out[k] = 1
    return out


def test_event_matching_is_maximal():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        ref = _random_segments(r)
        pred = _random_segments(r)
        counts = event_counts(pred, ref)
        tp = _max_matching(pred, ref)
        assert (counts.tp, counts.fp, counts.fn) == (tp, len(pred) - tp, len(ref) - tp)


def test_frame_scores_match_hand_counts():
    r = np.random.default_rng(7)
    for _ in range(1000):
        n = int(r.integers(1, 40))
        pred, ref = r.integers(0, 2, n), r.integers(0, 2, n)
        tp = sum(int(p == 1 and g == 1) for p, g in zip(pred, ref))
        fp = sum(int(p == 1 and g == 0) for p, g in zip(pred, ref))
        fn = sum(int(p == 0 and g == 1) for p, g in zip(pred, ref))
        tn = n - tp - fp - fn
        scores = frame_metrics(pred, ref)
        assert scores.counts == ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
        assert scores.fer == pytest.approx(100.0 * (fp + fn) / n, abs=1e-9)
        p_fa, p_miss = fa_miss(pred, ref)
        assert p_fa == (None if fp + tn == 0 else pytest.approx(100.0 * fp / (fp + tn), abs=1e-9))
        assert p_miss == (None if tp + fn == 0 else pytest.approx(100.0 * fn / (tp + fn), abs=1e-9))


def test_auc_matches_pairwise_oracle():
    r = np.random.default_rng(11)
    checked = 0
    while checked < 1000:
        n = int(r.integers(2, 30))
        ref = r.integers(0, 2, n)
        if ref.min() == ref.max():
            continue
        scores = np.round(r.uniform(0, 1, n), 1)
        pos, neg = scores[ref == 1], scores[ref == 0]
        wins = sum(float(p > q) + 0.5 * float(p == q) for p in pos for q in neg)
        assert auc(scores, ref) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-9)
        checked += 1


def test_double_threshold_matches_loop_oracle():
    r = np.random.default_rng(3)
    for _ in range(1000):
        probs = list(np.round(r.uniform(0, 1, int(r.integers(1, 50))), 2))
        low, hi = sorted(np.round(r.uniform(0, 1, 2), 2))
        assert list(double_threshold(probs, low, hi)) == _seed_and_grow(probs, low, hi)
