import os
import csv
import json
import math
from collections import OrderedDict
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import InvalidInput

SPEECH_LABEL = "Speech"


def round_percent(value):
    """Two decimals, round-half-even; None and non-finite values pass through as None"""
    if value is None:
        return None
    value = float(value)
    if not math.isfinite(value):
        return None
    return float(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _rounded(fields: Mapping) -> dict:
    out = {}
    for key, value in fields.items():
        if isinstance(value, float) or value is None:
            out[key] = round_percent(value)
        else:
            out[key] = value
    return out


def _ensure_parent(filepath: str):
    parent = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(parent, exist_ok=True)


def save_as_json(payload, filepath: str) -> str:
    """Canonical JSON: sorted keys, stable separators, trailing newline"""
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
        f.write("\n")
    return filepath


def save_report(report, filepath: str) -> str:
    """Save a MetricsReport (or its dict form) with percentages rounded"""
    fields = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    return save_as_json(_rounded(fields), filepath)


def save_sweep_rows(rows: Sequence, filepath: str) -> str:
    """One TSV row per threshold setting, columns taken from the first row"""
    _ensure_parent(filepath)
    records = [r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in rows]
    if not records:
        raise InvalidInput("No sweep rows to write")
    columns = list(records[0].keys())
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow({k: ("" if v is None else v) for k, v in _rounded(record).items()})
    return filepath


def save_roc_csv(points: Iterable[Tuple[float, float, float]], filepath: str) -> str:
    """threshold,tpr,fpr rows as produced by evaluation.roc_points"""
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["threshold", "tpr", "fpr"])
        for threshold, tpr, fpr in points:
            writer.writerow([repr(float(threshold)), repr(float(tpr)), repr(float(fpr))])
    return filepath


def read_roc_csv(filepath: str) -> List[Tuple[float, float, float]]:
    with open(filepath, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [(float(r["threshold"]), float(r["tpr"]), float(r["fpr"])) for r in reader]


# ---------------------------------------------------------------- segment label files

def save_segments_tsv(segments_by_clip: Mapping[str, Sequence[Tuple[float, float]]], filepath: str,
                      label: str = SPEECH_LABEL) -> str:
    """clip_id, onset, offset, label rows; a clip without segments gets a bare id row.

    Segments may carry their own label as a third element.
    """
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["clip_id", "onset", "offset", "label"])
        for clip_id, segments in segments_by_clip.items():
            if not segments:
                writer.writerow([clip_id])
            for segment in segments:
                onset, offset = segment[0], segment[1]
                writer.writerow([clip_id, f"{onset:.3f}", f"{offset:.3f}", segment[2] if len(segment) > 2 else label])
    return filepath


def read_segments_tsv(filepath: str, label: Optional[str] = SPEECH_LABEL) -> "OrderedDict[str, list]":
    """clip_id -> sorted [(onset, offset)] keeping rows whose label matches (case-insensitive).

    label=None keeps every row as (onset, offset, label).
    """
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"Label file not found: {filepath}")
    clips: "OrderedDict[str, list]" = OrderedDict()
    with open(filepath, encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not row or not row[0].strip() or (lineno == 1 and row[0] == "clip_id"):
                continue
            clip_id = row[0].strip()
            events = clips.setdefault(clip_id, [])
            if len(row) == 1 or all(not cell.strip() for cell in row[1:]):
                continue
            if len(row) < 4:
                raise InvalidInput(f"{filepath}:{lineno}: expected clip_id, onset, offset, label")
            try:
                onset, offset = float(row[1]), float(row[2])
            except ValueError:
                raise InvalidInput(f"{filepath}:{lineno}: onset/offset must be numbers")
            if not onset < offset:
                raise InvalidInput(f"{filepath}:{lineno}: onset {onset} is not before offset {offset}")
            event_label = row[3].strip()
            if label is None:
                events.append((onset, offset, event_label))
            elif event_label.lower() == label.lower():
                events.append((onset, offset))
    for events in clips.values():
        events.sort()
    return clips


# ---------------------------------------------------------------- training log

def append_log_record(filepath: str, record: Dict) -> None:
    """One JSON object per line so an interrupted run keeps every finished record"""
    with open(filepath, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")


def read_log(filepath: str) -> List[dict]:
    with open(filepath, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
