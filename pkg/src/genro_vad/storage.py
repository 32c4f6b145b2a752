# Copyright (c) 2025 Softwell Srl, Milano, Italy
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Run-directory storage built on fsspec.

Every artifact of the pipeline (datasets, flows, checkpoints, scores, reports)
is read and written through a :class:`RunStorage`, which wraps any fsspec
filesystem rooted at a base path. Real runs use the ``file`` protocol, tests
use the ``memory`` protocol.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import PurePosixPath
from typing import Any, BinaryIO, TextIO

import fsspec

from .exceptions import MissingPrerequisiteError, VadConfigError


class RunStorage:
    """Filesystem view rooted at a run directory.

    Args:
        base_path: Root of the run directory inside the filesystem
        protocol: Fsspec protocol (``file``, ``memory``, ...)
        **kwargs: Additional arguments passed to ``fsspec.filesystem()``

    Examples:
        >>> storage = RunStorage('/tmp/runs/demo')
        >>> storage.write_json('manifest.json', {'format_version': 1})
        >>> storage.read_json('manifest.json')
        {'format_version': 1}
        >>>
        >>> # In-memory, for tests
        >>> scratch = RunStorage('/scratch', protocol='memory')
    """

    def __init__(self, base_path: str, protocol: str = "file", **kwargs: Any):
        self.protocol = protocol
        self.base_path = base_path.rstrip("/") or "/"
        self.fs_kwargs = kwargs
        self.fs = fsspec.filesystem(protocol, **kwargs)

    def path_of(self, key: str) -> str:
        """Filesystem path of a run-relative key; ``""`` is the run directory.

        Raises:
            VadConfigError: If the key climbs out of the run directory
        """
        parts = [part for part in PurePosixPath(key).parts if part != "/"]
        if ".." in parts:
            raise VadConfigError(f"Key '{key}' leaves the run directory")
        return str(PurePosixPath(self.base_path, *parts))

    def child(self, key: str) -> RunStorage:
        """Return a storage rooted at a subdirectory of this run."""
        return RunStorage(self.path_of(key), self.protocol, **self.fs_kwargs)

    def exists(self, path: str) -> bool:
        """Whether an artifact or directory exists in the run."""
        return self.fs.exists(self.path_of(path))

    def require(self, path: str, producer: str) -> None:
        """Raise MissingPrerequisiteError unless ``path`` exists.

        Args:
            path: Relative artifact path
            producer: Name of the subcommand that produces the artifact
        """
        if not self.exists(path):
            raise MissingPrerequisiteError(
                f"Missing artifact '{self.path_of(path)}' (run '{producer}' first)"
            )

    def open(self, path: str, mode: str = "rb") -> BinaryIO | TextIO:
        """Open an artifact; writing modes create its parent directories."""
        full_path = self.path_of(path)
        if "w" in mode or "a" in mode:
            self._ensure_parent(full_path)
        return self.fs.open(full_path, mode)

    def read_bytes(self, path: str) -> bytes:
        """Read entire file as bytes."""
        with self.fs.open(self.path_of(path), "rb") as f:
            return f.read()

    def read_text(self, path: str, encoding: str = "utf-8") -> str:
        """Read entire file as text."""
        return self.read_bytes(path).decode(encoding)

    def write_bytes(self, path: str, data: bytes) -> None:
        """Write bytes to file, creating parent directories."""
        full_path = self.path_of(path)
        self._ensure_parent(full_path)
        with self.fs.open(full_path, "wb") as f:
            f.write(data)

    def write_text(self, path: str, text: str, encoding: str = "utf-8") -> None:
        """Write text to file, creating parent directories."""
        self.write_bytes(path, text.encode(encoding))

    def read_json(self, path: str) -> Any:
        """Read and decode a JSON document."""
        return json.loads(self.read_text(path))

    def write_json(self, path: str, data: Any) -> None:
        """Write a JSON document with a byte-stable layout (sorted keys, 2-space indent)."""
        self.write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def makedirs(self, path: str) -> None:
        """Create a directory and its parents (idempotent)."""
        self.fs.makedirs(self.path_of(path), exist_ok=True)

    def list_dir(self, key: str = "") -> list[str]:
        """Names of the direct children of a run directory, sorted."""
        full_path = self.path_of(key)
        if not self.fs.isdir(full_path):
            return []
        return sorted({PurePosixPath(item).name for item in self.fs.ls(full_path, detail=False)})

    def delete(self, path: str, recursive: bool = True) -> None:
        """Remove an artifact or a whole subdirectory; missing keys are ignored."""
        full_path = self.path_of(path)
        if not self.fs.exists(full_path):
            return
        self.fs.rm(full_path, recursive=recursive)

    def copy(self, src_path: str, dest_path: str) -> None:
        """Copy a file inside the run directory."""
        self.write_bytes(dest_path, self.read_bytes(src_path))

    def sha256(self, path: str) -> str:
        """Return the hex SHA-256 digest of a file."""
        digest = hashlib.sha256()
        with self.fs.open(self.path_of(path), "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()

    def _ensure_parent(self, full_path: str) -> None:
        parent = str(PurePosixPath(full_path).parent)
        if parent and parent != "/":
            self.fs.makedirs(parent, exist_ok=True)

    def __repr__(self) -> str:
        """String representation."""
        return f"RunStorage(protocol='{self.protocol}', base_path='{self.base_path}')"
