import os
import json
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Iterable, Iterator, Optional, Tuple, Union

from tqdm import tqdm

from .archives import load_features, save_features
from .dsp import DspConfig, LogMelSpec, load_clip, logmel

logger = logging.getLogger(__name__)


def cache_key(audio_path: str, cfg: DspConfig) -> str:
    """Digest of the audio file identity and every front-end setting"""
    stat = os.stat(audio_path)
    identity = {
        "path": os.path.abspath(audio_path), "mtime_ns": stat.st_mtime_ns, "size": stat.st_size,
        "dsp": asdict(cfg),
    }
    return hashlib.sha1(json.dumps(identity, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def clip_features(audio_path: str, cfg: DspConfig, clip_id: str = "", cache_dir: Optional[str] = None) -> LogMelSpec:
    """read -> resample -> log-Mel, reusing an LMS0 dump from cache_dir when the audio and settings match"""
    cached = None
    if cache_dir and clip_id:
        cached = os.path.join(cache_dir, f"{clip_id}.{cache_key(audio_path, cfg)}.lms")
    if cached and os.path.exists(cached):
        return load_features(cached, clip_id=clip_id)
    spec = logmel(load_clip(audio_path, cfg, clip_id=clip_id), cfg)
    if cached:
        save_features(spec, cached)
        # the cached copy is f32; hand back the same precision either way
        spec = load_features(cached, clip_id=clip_id)
    return spec


def _safe_features(row, cfg, cache_dir):
    try:
        return row, clip_features(row.audio_path, cfg, row.clip_id, cache_dir)
    except Exception as e:
        return row, e


def iter_clip_features(rows: Iterable, cfg: DspConfig, threads: int = 1, cache_dir: Optional[str] = None,
                       desc: str = "features") -> Iterator[Tuple[object, Union[LogMelSpec, Exception]]]:
    """Yield (row, spec) in manifest order; a failed clip yields (row, exception) instead of raising"""
    rows = list(rows)
    progress = tqdm(total=len(rows), desc=desc, unit="clip", disable=len(rows) < 2, leave=False)
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                for result in executor.map(lambda r: _safe_features(r, cfg, cache_dir), rows):
                    progress.update(1)
                    yield result
        else:
            for row in rows:
                progress.update(1)
                yield _safe_features(row, cfg, cache_dir)
    finally:
        progress.close()
