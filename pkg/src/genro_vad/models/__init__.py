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

"""Flow autoencoder and next-frame CVAE built on the autodiff package."""

from .cvae import CVAE, CVAEOutput, cvae_forward_train, cvae_loss, cvae_predict
from .layers import (
    Conv2d,
    ConvTranspose2d,
    Linear,
    Module,
    Parameter,
    load_module,
    save_module,
)
from .memae import MemAE, MemoryModule, entropy_loss, memae_loss, memory_address

__all__ = [
    "Module",
    "Parameter",
    "Conv2d",
    "ConvTranspose2d",
    "Linear",
    "save_module",
    "load_module",
    "MemAE",
    "MemoryModule",
    "memory_address",
    "entropy_loss",
    "memae_loss",
    "CVAE",
    "CVAEOutput",
    "cvae_forward_train",
    "cvae_loss",
    "cvae_predict",
]
