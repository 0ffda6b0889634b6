import os
import json
import logging
from dataclasses import fields, replace
from dotenv import load_dotenv

from utils.crnn import CrnnConfig
from utils.distill import DistillConfig
from utils.dsp import DspConfig, SpecAugConfig
from utils.errors import ConfigError
from utils.evaluation import ThresholdConfig
from utils.pipeline import PipelineConfig
from utils.train import TrainConfig

# Load environment variables from .env file (for local runs)
load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


class Config:
    # Reproducibility
    SEED = _env_int('VAD_SEED', 1234)

    # Worker threads for feature extraction and batch assembly
    THREADS = _env_int('VAD_THREADS', 1)

    LOG_LEVEL = os.getenv('VAD_LOG_LEVEL', 'INFO').upper()

    # Default home for checkpoints and intermediate files
    WORK_DIR = os.path.abspath(os.getenv('VAD_WORK_DIR', os.path.join(os.getcwd(), 'runs')))

    @classmethod
    def init_app(cls, log_level: str = None):
        level = (log_level or cls.LOG_LEVEL).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigError(f"Unknown log level {level!r}")
        logging.basicConfig(
            level=level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        os.makedirs(cls.WORK_DIR, exist_ok=True)
        logging.getLogger(__name__).debug(f"Work directory: {cls.WORK_DIR}")


# JSON section -> dataclass it overrides
SECTIONS = {
    'dsp': DspConfig,
    'specaug': SpecAugConfig,
    'model': CrnnConfig,
    'train': TrainConfig,
    'distill': DistillConfig,
    'threshold': ThresholdConfig,
}

# decided by the data or the training stage, never by a config file
RESERVED_MODEL_KEYS = {'labels', 'num_outputs'}


def _override(section: str, base, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"Config section {section!r} must be an object")
    known = {f.name for f in fields(SECTIONS[section])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in config section {section!r}: {unknown}")
    try:
        return replace(base, **values)
    except TypeError as e:
        raise ConfigError(f"Bad value in config section {section!r}: {e}")


def load_pipeline_config(path: str = None) -> PipelineConfig:
    """Defaults overridden field by field from a JSON file with optional sections"""
    cfg = PipelineConfig()
    if not path:
        return cfg
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except ValueError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")

    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {unknown}, expected some of {sorted(SECTIONS)}")

    updates = {}
    for section, values in data.items():
        if section == 'model':
            reserved = sorted(RESERVED_MODEL_KEYS & set(values))
            if reserved:
                raise ConfigError(f"Config section 'model' may not set {reserved}")
            # validate against a throwaway instance, keep the raw overrides
            _override(section, CrnnConfig(), values)
            updates['model'] = dict(values)
        else:
            updates[section] = _override(section, getattr(cfg, section), values)
    return replace(cfg, **updates)
