import os

import numpy as np

from utils.audio_reader import AudioClip, write_audio
from utils.dsp import DspConfig
from utils.features import cache_key, clip_features, iter_clip_features
from utils.manifest import ManifestRow

SR = 22050


def _wav(path, seed, amplitude=0.3):
    samples = amplitude * np.random.default_rng(seed).standard_normal(SR // 2)
    return write_audio(AudioClip(samples, SR), str(path))


def test_cached_features_are_reused(tmp_path):
    audio = _wav(tmp_path / "a.wav", 0)
    cache = str(tmp_path / "cache")
    first = clip_features(audio, DspConfig(), "c1", cache)
    assert len(os.listdir(cache)) == 1
    second = clip_features(audio, DspConfig(), "c1", cache)
    assert len(os.listdir(cache)) == 1
    np.testing.assert_array_equal(first.values, second.values)


def test_same_clip_id_with_different_audio_is_recomputed(tmp_path):
    cache = str(tmp_path / "cache")
    clean = clip_features(_wav(tmp_path / "clean" / "c1.wav", 0, 0.01), DspConfig(), "c1", cache)
    noisy_path = _wav(tmp_path / "noisy" / "c1.wav", 1, 0.5)
    noisy = clip_features(noisy_path, DspConfig(), "c1", cache)
    assert not np.allclose(clean.values, noisy.values)
    np.testing.assert_allclose(noisy.values, clip_features(noisy_path, DspConfig(), "c1").values, atol=1e-5)
    assert len(os.listdir(cache)) == 2


def test_changed_front_end_settings_miss_the_cache(tmp_path):
    audio = _wav(tmp_path / "a.wav", 0)
    cache = str(tmp_path / "cache")
    assert clip_features(audio, DspConfig(), "c1", cache).values.shape[1] == 64
    assert clip_features(audio, DspConfig(n_mels=32), "c1", cache).values.shape[1] == 32
    assert cache_key(audio, DspConfig()) != cache_key(audio, DspConfig(n_mels=32))


def test_rewritten_file_changes_the_key(tmp_path):
    audio = _wav(tmp_path / "a.wav", 0)
    before = cache_key(audio, DspConfig())
    _wav(tmp_path / "a.wav", 1)
    os.utime(audio, ns=(0, 10 ** 9))
    assert cache_key(audio, DspConfig()) != before


def test_iteration_keeps_manifest_order_and_reports_failures(tmp_path):
    rows = [
        ManifestRow("a", _wav(tmp_path / "a.wav", 0)),
        ManifestRow("missing", str(tmp_path / "missing.wav")),
        ManifestRow("b", _wav(tmp_path / "b.wav", 1)),
    ]
    for threads in (1, 3):
        results = list(iter_clip_features(rows, DspConfig(), threads=threads))
        assert [row.clip_id for row, _ in results] == ["a", "missing", "b"]
        assert isinstance(results[1][1], Exception)
        assert results[0][1].clip_id == "a"
