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

"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..exceptions import DimensionError, VadConfigError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Apply one Adam update without mutating the inputs.

    A missing (``None``) gradient counts as zero.

    Returns:
        The updated parameters and the new optimizer state.

    Raises:
        VadConfigError: If ``lr`` is not positive or a beta is outside [0, 1)

    Examples:
        >>> p, s = adam_step({'w': np.array([1.0])}, {'w': np.array([1.0])}, AdamState(), 0.1)
        >>> round(float(p['w'][0]), 6)
        0.9
    """
    if not lr > 0:
        raise VadConfigError(f"Learning rate must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise VadConfigError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")

    step = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {grad.shape}, expected {value.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for named tensor parameters.

    Args:
        params: Named leaf tensors; their ``data`` is replaced on every step
        lr: Learning rate
        beta1, beta2, eps: Adam hyperparameters
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if not lr > 0:
            raise VadConfigError(f"Learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def step(self) -> None:
        values = {name: t.data for name, t in self.params.items()}
        grads = {name: t.grad for name, t in self.params.items()}
        updated, self.state = adam_step(
            values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for name, tensor in self.params.items():
            tensor.data = updated[name]
