import numpy as np
import pytest

from utils.crnn import CrnnConfig
from utils.toy_corpus import ToyCorpusSpec, synth_toy_corpus


# 2 blocks, 4 mel bins, well under 500 parameters
TINY_CONFIG = CrnnConfig(
    block_channels=(2, 2), convs_per_block=(1, 1), pool_strides=((2, 2), (2, 2)),
    gru_hidden=3, num_outputs=2, input_dim=4,
)

# Small enough to train in a few seconds on a 64-bin front-end
SMALL_CONFIG = CrnnConfig(
    block_channels=(4, 8, 8), convs_per_block=(1, 1, 1), pool_strides=((2, 4), (2, 4), (1, 4)),
    gru_hidden=8,
)


def numeric_grad(f, array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f() with respect to `array`, perturbed in place"""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + h
        f_plus = f()
        array[idx] = original - h
        f_minus = f()
        array[idx] = original
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def small_config():
    return SMALL_CONFIG


@pytest.fixture
def toy_spec():
    return ToyCorpusSpec(n_clips=6, clip_dur_s=2.0, speech_event_rate=1.0, nonspeech_event_rate=1.0,
                         speech_clip_prob=0.5, min_event_s=0.3, max_event_s=0.6, seed=7)


@pytest.fixture
def toy_corpus(tmp_path, toy_spec):
    return synth_toy_corpus(toy_spec, str(tmp_path / "toy"))
