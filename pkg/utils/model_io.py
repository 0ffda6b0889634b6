"""
Versioned model container.

    "GPVD" | u32 format | u32 json_len | canonical JSON config block
    then, until EOF, one record per tensor:
    u16 name_len | name | u8 rank | u32 extents[rank] | little-endian f32 payload
"""

import os
import json
import struct
import logging
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from .crnn import Crnn, CrnnConfig
from .errors import ModelFormatError

logger = logging.getLogger(__name__)

MAGIC = b"GPVD"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_container(path: str, meta: dict, tensors: Dict[str, np.ndarray]) -> str:
    """Write atomically so a crash never leaves a half-written model behind"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = canonical_json(meta).encode("utf-8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for name, value in tensors.items():
            encoded = name.encode("utf-8")
            array = np.ascontiguousarray(value, dtype="<f4")
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())
    os.replace(tmp_path, path)
    return path


def read_container(path: str) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"{path} is not a model file (bad magic {blob[:4]!r})")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    pos = 12 + header_len
    try:
        meta = json.loads(blob[12:pos].decode("utf-8"))
    except ValueError as e:
        raise ModelFormatError(f"{path}: corrupt config block: {e}")

    tensors = OrderedDict()
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        except (struct.error, ValueError) as e:
            raise ModelFormatError(f"{path}: truncated tensor record at byte {pos}: {e}")
        pos += 4 * count
        tensors[name] = payload.astype(np.float32).reshape(shape)
    return meta, tensors


def save_model(model: Crnn, path: str, extra_meta: Optional[dict] = None,
               extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> str:
    meta = {"kind": "model", "version": Crnn.VERSION, "model": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    tensors = OrderedDict(model.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    write_container(path, meta, tensors)
    logger.info(f"Saved model to {path}")
    return path


def load_checkpoint(path: str):
    """Return (model, meta, tensors that are not model state)"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Model file not found: {path}")
    meta, tensors = read_container(path)
    if "model" not in meta:
        raise ModelFormatError(f"{path}: config block has no model section")
    model = Crnn(CrnnConfig.from_dict(meta["model"]), dtype=np.float32)
    own = model.state_dict()
    model.load_state_dict({k: v for k, v in tensors.items() if k in own})
    extra = OrderedDict((k, v) for k, v in tensors.items() if k not in own)
    return model, meta, extra


def load_model(path: str) -> Crnn:
    model, _, _ = load_checkpoint(path)
    return model
