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

"""Parameter containers and the basic layers of both networks.

A :class:`Module` registers :class:`Parameter` and sub-module attributes
as they are assigned, so ``named_parameters`` walks the tree in definition
order with dotted names (``enc1.weight``). Those names are the keys of the
checkpoint containers.
"""

from __future__ import annotations

import logging
from typing import Any, Iterator, Mapping, Optional

import numpy as np

from ..autodiff import functional as F
from ..autodiff.container import load_tensors, save_tensors
from ..autodiff.tensor import Tensor, get_dtype, no_grad
from ..exceptions import ContainerFormatError, DimensionError, UntrainedModelError
from ..storage import RunStorage

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data: Any):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class of every layer and network.

    Attributes:
        trained: True once the parameters were fitted or loaded from a
            checkpoint; inference entry points refuse untrained modules
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        self.trained = False

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.zero_grad()

    def requires_grad_(self, flag: bool) -> Module:
        """Freeze (False) or unfreeze (True) every parameter."""
        for _, param in self.named_parameters():
            param.requires_grad = flag
        return self

    def mark_trained(self, flag: bool = True) -> Module:
        object.__setattr__(self, "trained", flag)
        for module in self._modules.values():
            module.mark_trained(flag)
        return self

    def check_trained(self) -> None:
        if not self.trained:
            raise UntrainedModelError(
                f"{type(self).__name__} has never been trained or loaded from a checkpoint"
            )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Replace all parameter values; names and shapes must match exactly.

        Raises:
            ContainerFormatError: On missing or unexpected parameter names
            DimensionError: On a shape mismatch
        """
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ContainerFormatError(
                f"State does not match {type(self).__name__}: "
                f"missing={missing} unexpected={unexpected}"
            )
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(
                    f"Parameter '{name}' expects shape {param.shape}, got {value.shape}"
                )
            param.data = value.astype(get_dtype())
            param.grad = None

    def num_parameters(self) -> int:
        return sum(param.size for _, param in self.named_parameters())


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Strided 2-D convolution with bias, NCHW."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(_uniform(rng, (out_channels,), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.stride, self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    """Transposed convolution (upsampling), the adjoint geometry of Conv2d."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size // max(stride * stride, 1)
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            _uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(_uniform(rng, (out_channels,), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d_transpose(x, self.weight, self.stride, self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class Linear(Module):
    """Affine map ``x @ W + b`` over (N, in_features) inputs."""

    def __init__(
        self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(_uniform(rng, (out_features,), in_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    return x.reshape(x.shape[0], -1)


def infer(module: Module, *arrays: np.ndarray, **kwargs: Any) -> Any:
    """Run ``module`` on constant inputs without recording a graph."""
    module.check_trained()
    with no_grad():
        return module(*(Tensor(a) for a in arrays), **kwargs)


# ---------------------------------------------------------------------- checkpoints


def save_module(
    storage: RunStorage, path: str, module: Module, metadata: Mapping[str, Any]
) -> None:
    """Write parameters to ``path`` (VADT) and ``metadata`` to ``path + '.json'``."""
    save_tensors(storage, path, module.state_dict())
    storage.write_json(
        path + ".json",
        {
            **metadata,
            "model": type(module).__name__,
            "num_parameters": module.num_parameters(),
        },
    )
    logger.info("Saved %s checkpoint to %s", type(module).__name__, path)


def load_module(storage: RunStorage, path: str, module: Module, producer: str) -> dict[str, Any]:
    """Load parameters saved by :func:`save_module` into ``module``.

    Returns:
        The metadata sidecar

    Raises:
        MissingPrerequisiteError: If the checkpoint does not exist
    """
    storage.require(path, producer)
    module.load_state_dict(load_tensors(storage, path))
    module.mark_trained()
    meta_path = path + ".json"
    return storage.read_json(meta_path) if storage.exists(meta_path) else {}
