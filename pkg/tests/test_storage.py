"""Tests for RunStorage on the in-memory and local filesystems."""

import hashlib

import pytest

from genro_vad.exceptions import MissingPrerequisiteError, VadConfigError
from genro_vad.storage import RunStorage


@pytest.mark.unit
class TestReadWrite:
    """Basic file operations."""

    def test_text_and_bytes(self, memory_storage):
        """Test text and bytes round through the same file."""
        memory_storage.write_text("a/b/c.txt", "hello")
        assert memory_storage.read_bytes("a/b/c.txt") == b"hello"
        assert memory_storage.exists("a/b")

    def test_json_layout_is_stable(self, memory_storage):
        """Test JSON is written with sorted keys and a trailing newline."""
        memory_storage.write_json("m.json", {"b": 1, "a": [1, 2]})
        text = memory_storage.read_text("m.json")
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("}\n")
        assert memory_storage.read_json("m.json") == {"a": [1, 2], "b": 1}

    def test_list_dir(self, memory_storage):
        """Test list_dir returns sorted direct children only."""
        memory_storage.write_text("d/z.txt", "")
        memory_storage.write_text("d/a.txt", "")
        memory_storage.write_text("d/sub/x.txt", "")
        assert memory_storage.list_dir("d") == ["a.txt", "sub", "z.txt"]
        assert memory_storage.list_dir("missing") == []

    def test_delete_is_idempotent(self, memory_storage):
        """Test deleting twice does not fail."""
        memory_storage.write_text("d/x.txt", "x")
        memory_storage.delete("d")
        memory_storage.delete("d")
        assert not memory_storage.exists("d/x.txt")

    def test_copy(self, memory_storage):
        """Test copy duplicates the content."""
        memory_storage.write_bytes("src.bin", b"\x00\x01")
        memory_storage.copy("src.bin", "out/dst.bin")
        assert memory_storage.read_bytes("out/dst.bin") == b"\x00\x01"

    def test_sha256(self, memory_storage):
        """Test the digest matches hashlib."""
        memory_storage.write_bytes("f.bin", b"abc")
        assert memory_storage.sha256("f.bin") == hashlib.sha256(b"abc").hexdigest()

    def test_child_shares_filesystem(self, memory_storage):
        """Test a child storage sees files written by its parent."""
        memory_storage.write_text("runs/one/x.txt", "1")
        child = memory_storage.child("runs/one")
        assert child.read_text("x.txt") == "1"
        assert child.base_path == memory_storage.base_path + "/runs/one"

    def test_keys_stay_inside_the_run(self, memory_storage):
        """Test leading slashes are run-relative and parent references are refused."""
        assert memory_storage.path_of("/eval/metrics.json") == memory_storage.path_of(
            "eval/metrics.json"
        )
        assert memory_storage.path_of("") == memory_storage.base_path
        with pytest.raises(VadConfigError, match="leaves the run directory"):
            memory_storage.read_bytes("../other/config.yaml")

    def test_list_dir_of_a_child(self, memory_storage):
        """Test a child storage lists its own root."""
        memory_storage.write_text("scores/gt/a.json", "{}")
        memory_storage.write_text("scores/detected/b.json", "{}")
        assert memory_storage.child("scores").list_dir() == ["detected", "gt"]


@pytest.mark.unit
class TestRequire:
    """Prerequisite checks."""

    def test_missing_artifact(self, memory_storage):
        """Test require names the producing subcommand."""
        with pytest.raises(MissingPrerequisiteError, match="run 'gen' first"):
            memory_storage.require("data/manifest.json", "gen")

    def test_missing_prerequisite_exit_code(self, memory_storage):
        """Test the error maps to exit code 3."""
        with pytest.raises(MissingPrerequisiteError) as info:
            memory_storage.require("nothing", "flow")
        assert info.value.exit_code == 3

    def test_present_artifact(self, memory_storage):
        """Test require passes silently when the file exists."""
        memory_storage.write_text("data/manifest.json", "{}")
        memory_storage.require("data/manifest.json", "gen")


@pytest.mark.unit
class TestLocal:
    """The file protocol used by real runs."""

    def test_local_directory(self, tmp_path):
        """Test files land under the base path on disk."""
        storage = RunStorage(str(tmp_path / "run"))
        storage.write_json("eval/metrics.json", {"rows": []})
        assert (tmp_path / "run" / "eval" / "metrics.json").exists()

    def test_repr(self, tmp_path):
        """Test repr shows protocol and base path."""
        storage = RunStorage(str(tmp_path) + "/")
        assert repr(storage) == f"RunStorage(protocol='file', base_path='{tmp_path}')"
