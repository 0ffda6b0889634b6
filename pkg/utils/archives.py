"""
On-disk stores for per-clip frame matrices.

Label / probability archive (one data file plus `<path>.index`):

    per record: u16 id_len | id (utf-8) | u32 T | u8 scheme_len | scheme | T x 2 little-endian f32

The index is a two-column TSV (clip_id, byte offset). Probability archives
use the same layout with scheme "probs": column 0 Speech, column 1 non-Speech.

Feature dumps ("LMS0") hold one log-Mel matrix each:

    "LMS0" | u32 T | u32 D | f32 hop_s | T x D little-endian f32
"""

import os
import csv
import struct
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .dsp import LogMelSpec
from .errors import InvalidInput, ModelFormatError

logger = logging.getLogger(__name__)

PROBS_SCHEME = "probs"
FEATURE_MAGIC = b"LMS0"


@dataclass
class ArchiveRecord:
    clip_id: str
    values: np.ndarray
    scheme: str


def index_path(path: str) -> str:
    return f"{path}.index"


class ArchiveWriter:
    """Append-only writer; both files only appear under their final names on close()"""

    def __init__(self, path: str):
        self.path = path
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self._tmp = f"{path}.tmp"
        self._file = open(self._tmp, "wb")
        self._index = OrderedDict()
        self._lock = threading.Lock()

    def append(self, clip_id: str, values: np.ndarray, scheme: str):
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[1] != 2:
            raise InvalidInput(f"{clip_id}: archive records are T x 2, got {values.shape}")
        encoded_id = clip_id.encode("utf-8")
        encoded_scheme = scheme.encode("utf-8")
        payload = (
            struct.pack("<H", len(encoded_id)) + encoded_id
            + struct.pack("<I", values.shape[0])
            + struct.pack("<B", len(encoded_scheme)) + encoded_scheme
            + np.ascontiguousarray(values, dtype="<f4").tobytes()
        )
        with self._lock:
            if clip_id in self._index:
                raise InvalidInput(f"Duplicate clip id in archive: {clip_id}")
            self._index[clip_id] = self._file.tell()
            self._file.write(payload)

    def __len__(self):
        return len(self._index)

    def close(self):
        if self._file.closed:
            return
        self._file.close()
        tmp_index = f"{index_path(self.path)}.tmp"
        with open(tmp_index, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            for clip_id, offset in self._index.items():
                writer.writerow([clip_id, offset])
        os.replace(self._tmp, self.path)
        os.replace(tmp_index, index_path(self.path))
        logger.info(f"Wrote {len(self._index)} record(s) to {self.path}")

    def abort(self):
        self._file.close()
        if os.path.exists(self._tmp):
            os.remove(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def write_archive(path: str, records: Iterable[ArchiveRecord]) -> str:
    with ArchiveWriter(path) as writer:
        for record in records:
            writer.append(record.clip_id, record.values, record.scheme)
    return path


def read_index(path: str) -> "OrderedDict[str, int]":
    if not os.path.exists(path) or not os.path.exists(index_path(path)):
        raise FileNotFoundError(f"Archive or index not found: {path}")
    index = OrderedDict()
    with open(index_path(path), encoding="utf-8", newline="") as f:
        for row in csv.reader(f, delimiter="\t"):
            if row:
                index[row[0]] = int(row[1])
    return index


def _decode_record(blob: bytes, offset: int, path: str) -> ArchiveRecord:
    try:
        (id_len,) = struct.unpack_from("<H", blob, offset)
        pos = offset + 2
        clip_id = blob[pos:pos + id_len].decode("utf-8")
        pos += id_len
        (frames,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        (scheme_len,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        scheme = blob[pos:pos + scheme_len].decode("utf-8")
        pos += scheme_len
        values = np.frombuffer(blob, dtype="<f4", count=2 * frames, offset=pos)
    except (struct.error, ValueError) as e:
        raise ModelFormatError(f"{path}: corrupt archive record at byte {offset}: {e}")
    return ArchiveRecord(clip_id=clip_id, values=values.astype(np.float32).reshape(frames, 2), scheme=scheme)


def read_archive(path: str) -> "OrderedDict[str, ArchiveRecord]":
    """Every record keyed by clip id, in index order"""
    index = read_index(path)
    with open(path, "rb") as f:
        blob = f.read()
    records = OrderedDict()
    for clip_id, offset in index.items():
        record = _decode_record(blob, offset, path)
        if record.clip_id != clip_id:
            raise ModelFormatError(f"{path}: index points {clip_id!r} at a record for {record.clip_id!r}")
        records[clip_id] = record
    return records


def read_record(path: str, clip_id: str, index: Optional[dict] = None) -> ArchiveRecord:
    index = read_index(path) if index is None else index
    if clip_id not in index:
        raise KeyError(f"{clip_id} not in archive {path}")
    offset = index[clip_id]
    with open(path, "rb") as f:
        f.seek(offset)
        head = f.read(2)
        (id_len,) = struct.unpack("<H", head)
        rest = f.read(id_len + 4 + 1)
        (frames,) = struct.unpack_from("<I", rest, id_len)
        scheme_len = rest[-1]
        body = f.read(scheme_len + 8 * frames)
    return _decode_record(head + rest + body, 0, path)


# ---------------------------------------------------------------- feature dumps

def save_features(spec: LogMelSpec, path: str) -> str:
    values = np.ascontiguousarray(spec.values, dtype="<f4")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<IIf", values.shape[0], values.shape[1], spec.frame_hop_s))
        f.write(values.tobytes())
    os.replace(tmp_path, path)
    return path


def load_features(path: str, clip_id: str = "") -> LogMelSpec:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ModelFormatError(f"{path} is not a feature dump")
    frames, dim, hop = struct.unpack_from("<IIf", blob, 4)
    values = np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=16).reshape(frames, dim)
    return LogMelSpec(values=values.astype(np.float32), frame_hop_s=round(float(hop), 6), clip_id=clip_id)
