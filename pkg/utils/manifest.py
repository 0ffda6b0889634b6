"""
Corpus manifests: one row per clip with its audio path, clip-level event
labels (semicolon joined) and an optional frame-label file.

TSV with a header row is the default; `.jsonl` / `.json` files are read as
JSON lines with the same field names.
"""

import os
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ManifestError

logger = logging.getLogger(__name__)

COLUMNS = ("clip_id", "audio_path", "clip_labels", "frame_labels")
LABEL_SEPARATOR = ";"


@dataclass(frozen=True)
class ManifestRow:
    clip_id: str
    audio_path: str
    clip_labels: Tuple[str, ...] = field(default_factory=tuple)
    frame_labels: Optional[str] = None


def _is_jsonl(path: str) -> bool:
    return os.path.splitext(path)[1].lower() in (".jsonl", ".json")


def _resolve(base_dir: str, value: Optional[str]) -> Optional[str]:
    if not value:
        return None
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base_dir, value))


def _split_labels(value) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(str(v).strip() for v in value if str(v).strip())
    return tuple(v.strip() for v in str(value).split(LABEL_SEPARATOR) if v.strip())


def _raw_rows(path: str) -> Iterable[dict]:
    if _is_jsonl(path):
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except ValueError as e:
                    raise ManifestError(f"{path}:{lineno}: not valid JSON: {e}")
    else:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f, delimiter="\t")
            if reader.fieldnames is None or not {"clip_id", "audio_path"} <= set(reader.fieldnames):
                raise ManifestError(f"{path}: header must name at least clip_id and audio_path")
            yield from reader


def read_manifest(path: str, check_paths: bool = True) -> List[ManifestRow]:
    """Parse and validate a manifest; relative paths resolve against its directory"""
    if not os.path.isfile(path):
        raise ManifestError(f"Manifest not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))

    rows = []
    seen = set()
    for raw in _raw_rows(path):
        clip_id = str(raw.get("clip_id") or "").strip()
        if not clip_id:
            raise ManifestError(f"{path}: row without clip_id: {raw}")
        if clip_id in seen:
            raise ManifestError(f"{path}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        rows.append(ManifestRow(
            clip_id=clip_id,
            audio_path=_resolve(base_dir, raw.get("audio_path")) or "",
            clip_labels=_split_labels(raw.get("clip_labels")),
            frame_labels=_resolve(base_dir, raw.get("frame_labels")),
        ))

    if check_paths:
        missing = [r.clip_id for r in rows if not r.audio_path or not os.path.exists(r.audio_path)]
        if missing:
            raise ManifestError(f"{path}: {len(missing)} audio path(s) do not exist, e.g. {missing[:5]}")
    logger.info(f"Loaded {len(rows)} clip(s) from {path}")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path: str) -> str:
    """Write TSV (or JSON lines by extension) with paths relative to the manifest directory"""
    base_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(base_dir, exist_ok=True)

    def relative(p):
        return os.path.relpath(p, base_dir) if p else ""

    records = [{
        "clip_id": r.clip_id,
        "audio_path": relative(r.audio_path),
        "clip_labels": LABEL_SEPARATOR.join(r.clip_labels),
        "frame_labels": relative(r.frame_labels),
    } for r in rows]

    with open(path, "w", encoding="utf-8", newline="") as f:
        if _is_jsonl(path):
            for record in records:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
        else:
            writer = csv.DictWriter(f, fieldnames=COLUMNS, delimiter="\t", lineterminator="\n")
            writer.writeheader()
            writer.writerows(records)
    return path


def label_vocabulary(rows: Sequence[ManifestRow], required: Sequence[str] = ("Speech",)) -> Tuple[str, ...]:
    """Sorted event names seen in the manifest plus any required ones"""
    names = {label for row in rows for label in row.clip_labels}
    lowered = {n.lower() for n in names}
    names.update(r for r in required if r.lower() not in lowered)
    return tuple(sorted(names, key=str.lower))


def clip_targets(rows: Sequence[ManifestRow], labels: Sequence[str]) -> np.ndarray:
    """N x E multi-hot clip labels; names outside the vocabulary are ignored with a warning"""
    position = {name.lower(): i for i, name in enumerate(labels)}
    targets = np.zeros((len(rows), len(labels)), dtype=np.float32)
    unknown = set()
    for i, row in enumerate(rows):
        for label in row.clip_labels:
            if label.lower() in position:
                targets[i, position[label.lower()]] = 1.0
            else:
                unknown.add(label)
    if unknown:
        logger.warning(f"Ignoring labels outside the model vocabulary: {sorted(unknown)[:10]}")
    return targets
