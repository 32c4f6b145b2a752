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

"""Three-stage training: flow autoencoder, then predictor, then both jointly.

Every stage draws its minibatch permutations (and the CVAE its latent
noise) from a generator seeded by the run seed and the stage, so a stage
rerun from the same inputs reproduces its loss curve bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .autodiff import Adam
from .autodiff.tensor import Tensor
from .config import CVAEConfig, FinetuneConfig, MemAEConfig
from .cubes import CubeBatch
from .exceptions import DimensionError, NumericDivergenceError
from .models import CVAE, MemAE, cvae_loss, memae_loss
from .models.memae import memae_objective

logger = logging.getLogger(__name__)

STAGE_MEMAE = "train-flowae"
STAGE_CVAE = "train-cvae"
STAGE_FINETUNE = "finetune"


@dataclass
class LossCurve:
    """Mean training loss per epoch plus the mean of each loss term."""

    stage: str
    losses: list[float] = field(default_factory=list)
    terms: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, object]:
        return {"stage": self.stage, "losses": self.losses, "terms": self.terms}


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(order[start : start + batch_size])


def _run_epochs(
    stage: str,
    n: int,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    optimizer: Adam,
    step: Callable[[np.ndarray], tuple[Tensor, dict[str, float]]],
) -> LossCurve:
    if n == 0:
        raise DimensionError(f"{stage}: no training cubes")
    curve = LossCurve(stage)
    for epoch in range(epochs):
        total = 0.0
        sums: dict[str, float] = {}
        for batch_no, index in enumerate(_minibatches(n, batch_size, rng)):
            optimizer.zero_grad()
            try:
                loss, terms = step(index)
                loss.backward()
            except NumericDivergenceError as e:
                raise NumericDivergenceError(
                    f"{stage} diverged at epoch {epoch} batch {batch_no}: {e}"
                ) from e
            optimizer.step()
            value = loss.item()
            total += value * len(index)
            for key, term in terms.items():
                sums[key] = sums.get(key, 0.0) + term * len(index)
            logger.debug("%s epoch %d batch %d loss %.6g", stage, epoch, batch_no, value)
        curve.losses.append(total / n)
        curve.terms.append({key: value / n for key, value in sums.items()})
        logger.info("%s epoch %d/%d loss %.6g", stage, epoch + 1, epochs, curve.losses[-1])
    return curve


def train_memae(
    cubes: CubeBatch, cfg: MemAEConfig, seed: int, model: Optional[MemAE] = None
) -> tuple[MemAE, LossCurve]:
    """Fit the flow autoencoder on normal training cubes.

    Minimizes reconstruction MSE plus ``cfg.entropy_weight`` times the
    addressing entropy summed over the memory levels.

    Raises:
        NumericDivergenceError: If the loss becomes NaN or infinite
    """
    model = model or MemAE.from_config(cfg, in_channels=cubes.flows.shape[1], seed=seed)
    model.requires_grad_(True)
    optimizer = Adam(model.parameters(), cfg.lr)
    rng = np.random.default_rng([seed, 10])

    def step(index: np.ndarray) -> tuple[Tensor, dict[str, float]]:
        return memae_loss(model, Tensor(cubes.flows[index]), cfg.entropy_weight)

    curve = _run_epochs(STAGE_MEMAE, len(cubes), cfg.epochs, cfg.batch_size, rng, optimizer, step)
    model.mark_trained()
    return model, curve


def reconstruct_all(memae: MemAE, flows: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Autoencoder reconstructions of a whole flow array, chunk by chunk."""
    parts = [memae.reconstruct(flows[i : i + chunk]) for i in range(0, len(flows), chunk)]
    return np.concatenate(parts) if parts else np.zeros_like(flows)


def train_cvae(
    cubes: CubeBatch,
    memae: MemAE,
    cfg: CVAEConfig,
    seed: int,
    t_len: int,
    model: Optional[CVAE] = None,
) -> tuple[CVAE, LossCurve]:
    """Fit the predictor on frozen autoencoder reconstructions.

    Raises:
        UntrainedModelError: If ``memae`` was never trained or loaded
    """
    memae.requires_grad_(False)
    reconstructions = reconstruct_all(memae, cubes.flows)
    size = cubes.images.shape[-1]
    model = model or CVAE.from_config(cfg, t_len=t_len, size=size, seed=seed)
    model.requires_grad_(True)
    optimizer = Adam(model.parameters(), cfg.lr)
    rng = np.random.default_rng([seed, 20])

    def step(index: np.ndarray) -> tuple[Tensor, dict[str, float]]:
        out = model(Tensor(cubes.images[index]), Tensor(reconstructions[index]), rng=rng)
        return cvae_loss(out, cubes.targets[index], cfg.beta)

    curve = _run_epochs(STAGE_CVAE, len(cubes), cfg.epochs, cfg.batch_size, rng, optimizer, step)
    model.mark_trained()
    return model, curve


def finetune_joint(
    cubes: CubeBatch,
    memae: MemAE,
    cvae: CVAE,
    cfg: FinetuneConfig,
    memae_cfg: MemAEConfig,
    cvae_cfg: CVAEConfig,
    seed: int,
) -> tuple[MemAE, CVAE, LossCurve]:
    """Adjust both networks together on the weighted sum of their losses.

    The predictor consumes the live autoencoder output, so prediction
    errors also update the autoencoder.
    """
    memae.check_trained()
    cvae.check_trained()
    memae.requires_grad_(True)
    cvae.requires_grad_(True)
    params = {f"memae.{k}": v for k, v in memae.named_parameters()}
    params.update({f"cvae.{k}": v for k, v in cvae.named_parameters()})
    optimizer = Adam(params, cfg.lr)
    rng = np.random.default_rng([seed, 30])

    def step(index: np.ndarray) -> tuple[Tensor, dict[str, float]]:
        flows = Tensor(cubes.flows[index])
        reconstruction, weights = memae(flows)
        m_loss, m_terms = memae_objective(reconstruction, weights, flows, memae_cfg.entropy_weight)
        out = cvae(Tensor(cubes.images[index]), reconstruction, rng=rng)
        c_loss, c_terms = cvae_loss(out, cubes.targets[index], cvae_cfg.beta)
        loss = m_loss * cfg.memae_weight + c_loss * cfg.cvae_weight
        return loss, {**m_terms, **c_terms}

    curve = _run_epochs(STAGE_FINETUNE, len(cubes), cfg.epochs, cfg.batch_size, rng, optimizer, step)
    memae.mark_trained()
    cvae.mark_trained()
    return memae, cvae, curve
