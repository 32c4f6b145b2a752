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

"""Multi-level memory-augmented flow autoencoder with skip connections.

The encoder halves the resolution three times. Every encoder level is
passed through its own memory module, which re-expresses each spatial
feature vector as a sparse convex combination of learned prototype slots.
The decoder upsamples from the deepest memory output and adds the memory
output of the matching encoder level at each step (additive skips), so
only patterns the memories can represent are reconstructed well.

Skip wiring, decoder input by level::

    level 3: mem3(enc3)
    level 2: dec3(...) + mem2(enc2)
    level 1: dec2(...) + mem1(enc1)
    output:  dec1(...)
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor
from ..exceptions import DimensionError, VadConfigError
from .layers import Conv2d, ConvTranspose2d, Module, Parameter, infer

if TYPE_CHECKING:
    from ..config import MemAEConfig

ENTROPY_EPS = 1e-12
NORM_EPS = 1e-12


def memory_address(
    query: Tensor, slots: Tensor, threshold: float = 0.0
) -> tuple[Tensor, Tensor]:
    """Address a memory with a batch of queries.

    Weights are the softmax of the cosine similarities between each query
    and every slot. With ``threshold > 0`` weights below it are zeroed and
    the rest renormalized; if nothing survives the best slot gets weight 1.
    Zero queries address all slots uniformly.

    Args:
        query: (Q, D) query vectors
        slots: (M, D) memory slots
        threshold: Hard shrinkage threshold in [0, 1)

    Returns:
        ``(weights, output)`` with weights (Q, M) on the simplex and
        output (Q, D) the weighted sum of slots

    Examples:
        >>> slots = Tensor(np.eye(3))
        >>> w, out = memory_address(Tensor([[0.0, 2.0, 0.0]]), slots)
        >>> int(np.argmax(w.data))
        1
    """
    if query.ndim != 2 or slots.ndim != 2 or query.shape[1] != slots.shape[1]:
        raise DimensionError(f"Query {query.shape} does not match memory {slots.shape}")
    sq_norm = F.square(query).sum(axis=1, keepdims=True)
    q_unit = query / F.sqrt(sq_norm + NORM_EPS)
    s_unit = slots / F.sqrt(F.square(slots).sum(axis=1, keepdims=True) + NORM_EPS)
    weights = F.softmax(q_unit @ s_unit.transpose(1, 0), axis=1)

    if threshold > 0:
        keep = weights.data >= threshold
        empty = ~keep.any(axis=1)
        keep[empty, np.argmax(weights.data[empty], axis=1)] = True
        keep[sq_norm.data[:, 0] == 0] = True
        masked = weights * keep.astype(weights.dtype)
        weights = masked / masked.sum(axis=1, keepdims=True)

    return weights, weights @ slots


def entropy_loss(weights: Tensor | Sequence[Tensor]) -> Tensor:
    """Mean addressing entropy ``-sum_i w_i log(w_i + eps)`` over queries.

    Examples:
        >>> round(entropy_loss(Tensor([[0.5, 0.5]])).item(), 4)
        0.6931
    """
    if not isinstance(weights, Tensor):
        terms = [entropy_loss(w) for w in weights]
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total
    per_query = -(weights * F.log(weights + ENTROPY_EPS)).sum(axis=1)
    return per_query.mean()


class MemoryModule(Module):
    """Learned prototype slots addressed per spatial position.

    Args:
        num_slots: Number of memory slots (>= 2)
        dim: Slot dimension, the channel count of the features
        threshold: Hard shrinkage threshold in [0, 1)
        rng: Generator for the slot initialization
    """

    def __init__(
        self,
        num_slots: int,
        dim: int,
        threshold: float,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if num_slots < 2:
            raise VadConfigError(f"A memory needs at least 2 slots, got {num_slots}")
        if not 0.0 <= threshold < 1.0:
            raise VadConfigError(f"Shrink threshold must lie in [0, 1), got {threshold}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(dim)
        self.threshold = threshold
        self.slots = Parameter(rng.uniform(-bound, bound, size=(num_slots, dim)))

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Replace every (N, C, H, W) feature vector by its memory read-out."""
        n, c, h, w = features.shape
        query = features.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        weights, out = memory_address(query, self.slots, self.threshold)
        return out.reshape(n, h, w, c).transpose(0, 3, 1, 2), weights


class MemAE(Module):
    """Three-level memory autoencoder over flow windows.

    Args:
        in_channels: Flow channels per cube, ``(t_len - 1) * 2``
        widths: Encoder channel widths per level
        num_slots: Slots of every memory
        threshold: Shrinkage threshold; ``None`` means ``1 / num_slots``
        leaky_slope: Negative slope of the activations
        seed: Initialization seed
    """

    def __init__(
        self,
        in_channels: int,
        widths: Sequence[int] = (32, 64, 128),
        num_slots: int = 100,
        threshold: Optional[float] = None,
        leaky_slope: float = 0.2,
        seed: int = 0,
    ):
        super().__init__()
        if len(widths) != 3:
            raise VadConfigError(f"MemAE needs exactly 3 level widths, got {list(widths)}")
        rng = np.random.default_rng([seed, 1])
        threshold = 1.0 / num_slots if threshold is None else threshold
        w1, w2, w3 = widths
        self.in_channels = in_channels
        self.slope = leaky_slope
        self.enc1 = Conv2d(in_channels, w1, 4, 2, 1, rng)
        self.enc2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.enc3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.mem1 = MemoryModule(num_slots, w1, threshold, rng)
        self.mem2 = MemoryModule(num_slots, w2, threshold, rng)
        self.mem3 = MemoryModule(num_slots, w3, threshold, rng)
        self.dec3 = ConvTranspose2d(w3, w2, 4, 2, 1, rng)
        self.dec2 = ConvTranspose2d(w2, w1, 4, 2, 1, rng)
        self.dec1 = ConvTranspose2d(w1, in_channels, 4, 2, 1, rng)

    @classmethod
    def from_config(cls, cfg: MemAEConfig, in_channels: int, seed: int) -> MemAE:
        return cls(
            in_channels,
            widths=cfg.widths,
            num_slots=cfg.num_slots,
            threshold=cfg.threshold,
            leaky_slope=cfg.leaky_slope,
            seed=seed,
        )

    def forward(self, flows: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Reconstruct (N, C, S, S) flows; S must be a multiple of 8.

        Returns:
            The reconstruction and the addressing weights of levels 1..3
        """
        if flows.ndim != 4 or flows.shape[1] != self.in_channels:
            raise DimensionError(
                f"MemAE expects (N, {self.in_channels}, S, S) flows, got {flows.shape}"
            )
        if flows.shape[2] % 8 or flows.shape[3] % 8:
            raise DimensionError(f"Cube size must be a multiple of 8, got {flows.shape[2:]}")
        act = self.slope
        e1 = F.leaky_relu(self.enc1(flows), act)
        e2 = F.leaky_relu(self.enc2(e1), act)
        e3 = F.leaky_relu(self.enc3(e2), act)
        m1, w1 = self.mem1(e1)
        m2, w2 = self.mem2(e2)
        m3, w3 = self.mem3(e3)
        d3 = F.leaky_relu(self.dec3(m3), act) + m2
        d2 = F.leaky_relu(self.dec2(d3), act) + m1
        return self.dec1(d2), [w1, w2, w3]

    def reconstruct(self, flows: np.ndarray) -> np.ndarray:
        """Inference-mode reconstruction of a numpy batch.

        Raises:
            UntrainedModelError: If the model was never trained or loaded
        """
        reconstruction, _ = infer(self, flows)
        return reconstruction.data.copy()


def memae_loss(
    model: MemAE, flows: Tensor, entropy_weight: float
) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction MSE plus ``entropy_weight`` times the summed level entropies."""
    reconstruction, weights = model(flows)
    return memae_objective(reconstruction, weights, flows, entropy_weight)


def memae_objective(
    reconstruction: Tensor, weights: Sequence[Tensor], flows: Tensor, entropy_weight: float
) -> tuple[Tensor, dict[str, float]]:
    recon = F.mse(reconstruction, flows)
    if entropy_weight == 0:
        return recon, {"reconstruction": recon.item(), "entropy": 0.0}
    entropy = entropy_loss(weights)
    return recon + entropy * entropy_weight, {
        "reconstruction": recon.item(),
        "entropy": entropy.item(),
    }
