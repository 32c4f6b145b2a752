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

"""Minimal numpy autodiff: tensors, differentiable ops, Adam and VADT I/O."""

from . import functional
from .container import decode_tensors, encode_tensors, load_tensors, save_tensors
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Graph,
    OpRecord,
    Tensor,
    as_tensor,
    get_dtype,
    get_precision,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "functional",
    "Tensor",
    "Graph",
    "OpRecord",
    "as_tensor",
    "get_dtype",
    "get_precision",
    "no_grad",
    "precision",
    "set_precision",
    "Adam",
    "AdamState",
    "adam_step",
    "encode_tensors",
    "decode_tensors",
    "save_tensors",
    "load_tensors",
]
