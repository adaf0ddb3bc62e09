"""Tests for run manifests and output verification."""

import hashlib
import json

import pytest

from plm_kit import __version__
from plm_kit.errors import DataFormatError, ReplayMismatchError
from plm_kit.manifest import RunManifest, digests, file_digest, manifest_path


@pytest.fixture
def artifact(tmp_path):
    path = tmp_path / "out.fasta"
    path.write_text(">a\nMKV\n", encoding="utf-8")
    return path


def _manifest(path):
    return RunManifest(
        command="make-synthetic",
        argv=["make-synthetic", "--out", str(path)],
        config={"seed": 0},
        seed=0,
        outputs=digests([path]),
    )


class TestDigests:
    def test_sha256(self, artifact):
        assert file_digest(artifact) == hashlib.sha256(b">a\nMKV\n").hexdigest()

    def test_manifest_path(self, artifact):
        assert manifest_path(artifact).name == "out.fasta.manifest.json"


class TestRunManifest:
    def test_write_and_load(self, artifact, tmp_path):
        manifest = _manifest(artifact)
        path = manifest.write(tmp_path / "m.json")
        loaded = RunManifest.load(path)
        assert loaded == manifest
        assert loaded.tool_version == __version__

    def test_written_json_is_sorted(self, artifact, tmp_path):
        path = _manifest(artifact).write(tmp_path / "m.json")
        keys = list(json.loads(path.read_text()))
        assert keys == sorted(keys)

    def test_outputs_match(self, artifact):
        _manifest(artifact).check_outputs()

    def test_changed_output(self, artifact):
        manifest = _manifest(artifact)
        artifact.write_text(">a\nMKW\n", encoding="utf-8")
        with pytest.raises(ReplayMismatchError, match="sha256"):
            manifest.check_outputs()

    def test_missing_input(self, artifact):
        manifest = _manifest(artifact)
        manifest.inputs = {str(artifact.with_name("gone.fasta")): "0" * 64}
        with pytest.raises(ReplayMismatchError, match="missing"):
            manifest.check_inputs()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "command": \n', encoding="utf-8")
        with pytest.raises(DataFormatError) as exc:
            RunManifest.load(path)
        assert exc.value.line is not None

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "partial.json"
        path.write_text('{"command": "pretrain"}', encoding="utf-8")
        with pytest.raises(DataFormatError, match="argv"):
            RunManifest.load(path)

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(DataFormatError):
            RunManifest.load(path)
