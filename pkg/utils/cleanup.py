import os
import re
import time
import logging

logger = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"^ckpt_(\d+)\.gpvd$")


def remove_stale_temp_files(directory: str, max_age_hours: float = 1.0) -> int:
    """Remove half-written *.tmp files older than max_age_hours left by an interrupted run"""
    if not os.path.isdir(directory):
        return 0
    removed = 0
    max_age_seconds = max_age_hours * 3600
    current_time = time.time()
    for filename in os.listdir(directory):
        filepath = os.path.join(directory, filename)
        if not filename.endswith(".tmp") or not os.path.isfile(filepath):
            continue
        if current_time - os.path.getmtime(filepath) > max_age_seconds:
            try:
                os.remove(filepath)
                removed += 1
                logger.info(f"Cleaned up stale temp file: {filename}")
            except OSError as e:
                logger.warning(f"Error removing file {filename}: {e}")
    return removed


def list_checkpoints(directory: str):
    """(step, path) of every periodic checkpoint, oldest first"""
    found = []
    for filename in os.listdir(directory):
        match = CHECKPOINT_PATTERN.match(filename)
        if match:
            found.append((int(match.group(1)), os.path.join(directory, filename)))
    return sorted(found)


def latest_checkpoint(directory: str):
    checkpoints = list_checkpoints(directory) if os.path.isdir(directory) else []
    return checkpoints[-1][1] if checkpoints else None


def prune_checkpoints(directory: str, keep: int = 3) -> list:
    """Delete all but the newest `keep` periodic checkpoints; best.gpvd is never touched"""
    checkpoints = list_checkpoints(directory)
    doomed = checkpoints[:-keep] if keep > 0 else checkpoints
    removed = []
    for _, path in doomed:
        try:
            os.remove(path)
            removed.append(path)
        except OSError as e:
            logger.warning(f"Error removing checkpoint {path}: {e}")
    if removed:
        logger.debug(f"Pruned {len(removed)} checkpoint(s) in {directory}")
    return removed
