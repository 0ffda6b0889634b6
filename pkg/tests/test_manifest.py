import numpy as np
import pytest

from utils.errors import ManifestError
from utils.manifest import (
    ManifestRow, clip_targets, label_vocabulary, read_manifest, write_manifest,
)


def _wav(tmp_path, name):
    path = tmp_path / "audio" / name
    path.parent.mkdir(exist_ok=True)
    path.write_bytes(b"")
    return str(path)


@pytest.mark.parametrize("filename", ["manifest.tsv", "manifest.jsonl"])
def test_write_then_read(tmp_path, filename):
    rows = [
        ManifestRow("a", _wav(tmp_path, "a.wav"), ("Speech", "Dog")),
        ManifestRow("b", _wav(tmp_path, "b.wav")),
    ]
    path = write_manifest(rows, str(tmp_path / filename))
    assert read_manifest(path) == rows


def test_relative_paths_resolve_against_manifest(tmp_path):
    _wav(tmp_path, "x.wav")
    path = tmp_path / "m.tsv"
    path.write_text("clip_id\taudio_path\tclip_labels\nx\taudio/x.wav\tSpeech; Music\n")
    (row,) = read_manifest(str(path))
    assert row.audio_path == str(tmp_path / "audio" / "x.wav")
    assert row.clip_labels == ("Speech", "Music")
    assert row.frame_labels is None


@pytest.mark.parametrize("body", [
    "clip\tpath\nx\ty\n",
    "clip_id\taudio_path\nx\taudio/x.wav\nx\taudio/x.wav\n",
    "clip_id\taudio_path\n\taudio/x.wav\n",
    "clip_id\taudio_path\nx\taudio/missing.wav\n",
])
def test_invalid_manifests(tmp_path, body):
    _wav(tmp_path, "x.wav")
    path = tmp_path / "m.tsv"
    path.write_text(body)
    with pytest.raises(ManifestError):
        read_manifest(str(path))


def test_missing_paths_allowed_when_unchecked(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("clip_id\taudio_path\nx\tnowhere.wav\n")
    assert read_manifest(str(path), check_paths=False)[0].clip_id == "x"


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(str(tmp_path / "absent.tsv"))


def test_bad_json_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"clip_id": "a", "audio_path": "a.wav"}\n{oops\n')
    with pytest.raises(ManifestError):
        read_manifest(str(path), check_paths=False)


def test_vocabulary_always_has_speech():
    rows = [ManifestRow("a", "a.wav", ("Dog",)), ManifestRow("b", "b.wav", ("music", "Dog"))]
    assert label_vocabulary(rows) == ("Dog", "music", "Speech")
    assert label_vocabulary([ManifestRow("c", "c.wav", ("speech",))]) == ("speech",)


def test_clip_targets_multi_hot(caplog):
    rows = [ManifestRow("a", "a.wav", ("Speech", "Dog")), ManifestRow("b", "b.wav", ("cat",))]
    targets = clip_targets(rows, ("Dog", "Speech"))
    np.testing.assert_array_equal(targets, [[1, 1], [0, 0]])
    assert "cat" in caplog.text
