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

"""VADT named-tensor container.

Layout (all integers little endian)::

    b"VADT"  u16 version
    repeated until end of file:
        u16 name_length, name (UTF-8)
        u8 rank, rank x u32 dims
        prod(dims) x f32 payload, row major

Metadata that is not a tensor (hyperparameters, model hash, loss curves)
lives in a JSON sidecar written next to the container by the caller.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from ..exceptions import ContainerFormatError
from ..storage import RunStorage

MAGIC = b"VADT"
VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays into VADT bytes (stored as float32)."""
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerFormatError(f"Tensor name too long: {name[:40]}...")
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ContainerFormatError(f"Tensor '{name}' has rank {array.ndim}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    """Parse VADT bytes into named float32 arrays, preserving record order."""
    if data[:4] != MAGIC:
        raise ContainerFormatError("Not a VADT container (bad magic)")
    if len(data) < 6:
        raise ContainerFormatError("Truncated VADT header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ContainerFormatError(f"Unsupported VADT version {version}")

    tensors: dict[str, np.ndarray] = {}
    offset = 6
    try:
        while offset < len(data):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = offset + 4 * count
            if end > len(data):
                raise ContainerFormatError(f"Truncated payload for tensor '{name}'")
            array = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            tensors[name] = array.reshape(dims).astype(np.float32)
            offset = end
    except (struct.error, UnicodeDecodeError) as e:
        raise ContainerFormatError(f"Corrupt VADT record at byte {offset}: {e}") from e
    return tensors


def save_tensors(storage: RunStorage, path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` inside ``storage``."""
    storage.write_bytes(path, encode_tensors(tensors))


def load_tensors(storage: RunStorage, path: str) -> dict[str, np.ndarray]:
    """Read named arrays from ``path`` inside ``storage``."""
    return decode_tensors(storage.read_bytes(path))
