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

"""Conditional VAE predicting the next crop of a cube.

Two convolutional encoders read the observed crops (the condition) and the
reconstructed flows. The posterior over the latent ``z`` sees both, the
learned prior sees the condition only. The decoder maps ``z`` together
with both feature vectors back to a 3-channel crop, with additive skips
from the condition encoder, and squashes it into [0, 1].

Training samples ``z = mu + sigma * eps``; scoring uses the prior mean so
predictions are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, no_grad
from ..exceptions import DimensionError, VadConfigError
from .layers import Conv2d, ConvTranspose2d, Linear, Module, flatten

if TYPE_CHECKING:
    from ..config import CVAEConfig

PREDICT_MODES = ("prior-mean", "posterior")


@dataclass
class CVAEOutput:
    """Prediction and the parameters of both latent Gaussians."""

    prediction: Tensor
    mu: Tensor
    logvar: Tensor
    mu0: Tensor
    logvar0: Tensor


def soft_clamp(x: Tensor, limit: float) -> Tensor:
    """Smoothly bound ``x`` to (-limit, limit)."""
    return F.tanh(x * (1.0 / limit)) * limit


class CVAE(Module):
    """Next-frame predictor conditioned on past crops and reconstructed flow.

    Args:
        image_channels: ``t_len * 3``
        flow_channels: ``(t_len - 1) * 2``
        size: Cube side, a multiple of 8
        widths: Encoder channel widths per level
        z_dim: Latent dimension
        logvar_limit: Bound of every log-variance
        leaky_slope: Negative slope of the activations
        seed: Initialization seed
    """

    def __init__(
        self,
        image_channels: int,
        flow_channels: int,
        size: int = 32,
        widths: Sequence[int] = (32, 64, 64),
        z_dim: int = 64,
        logvar_limit: float = 6.0,
        leaky_slope: float = 0.2,
        seed: int = 0,
    ):
        super().__init__()
        if len(widths) != 3:
            raise VadConfigError(f"CVAE needs exactly 3 level widths, got {list(widths)}")
        if size % 8:
            raise VadConfigError(f"Cube size must be a multiple of 8, got {size}")
        rng = np.random.default_rng([seed, 2])
        w1, w2, w3 = widths
        self.image_channels = image_channels
        self.flow_channels = flow_channels
        self.size = size
        self.z_dim = z_dim
        self.bottleneck = (w3, size // 8, size // 8)
        self.logvar_limit = logvar_limit
        self.slope = leaky_slope
        feat = w3 * (size // 8) ** 2

        self.img1 = Conv2d(image_channels, w1, 4, 2, 1, rng)
        self.img2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.img3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.flow1 = Conv2d(flow_channels, w1, 4, 2, 1, rng)
        self.flow2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.flow3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.post_mu = Linear(2 * feat, z_dim, rng)
        self.post_logvar = Linear(2 * feat, z_dim, rng)
        self.prior_mu = Linear(feat, z_dim, rng)
        self.prior_logvar = Linear(feat, z_dim, rng)
        self.dec_in = Linear(z_dim + 2 * feat, feat, rng)
        self.dec3 = ConvTranspose2d(w3, w2, 4, 2, 1, rng)
        self.dec2 = ConvTranspose2d(w2, w1, 4, 2, 1, rng)
        self.dec1 = ConvTranspose2d(w1, 3, 4, 2, 1, rng)

    @classmethod
    def from_config(cls, cfg: CVAEConfig, t_len: int, size: int, seed: int) -> CVAE:
        return cls(
            t_len * 3,
            (t_len - 1) * 2,
            size=size,
            widths=cfg.widths,
            z_dim=cfg.z_dim,
            logvar_limit=cfg.logvar_limit,
            leaky_slope=cfg.leaky_slope,
            seed=seed,
        )

    def _check(self, images: Tensor, flows: Tensor) -> None:
        expected_img = (self.image_channels, self.size, self.size)
        expected_flow = (self.flow_channels, self.size, self.size)
        if images.ndim != 4 or images.shape[1:] != expected_img:
            raise DimensionError(f"CVAE expects images (N, *{expected_img}), got {images.shape}")
        if flows.ndim != 4 or flows.shape[1:] != expected_flow or flows.shape[0] != images.shape[0]:
            raise DimensionError(f"CVAE expects flows (N, *{expected_flow}), got {flows.shape}")

    def _encode(self, images: Tensor, flows: Tensor) -> tuple[list[Tensor], Tensor]:
        act = self.slope
        c1 = F.leaky_relu(self.img1(images), act)
        c2 = F.leaky_relu(self.img2(c1), act)
        c3 = F.leaky_relu(self.img3(c2), act)
        f1 = F.leaky_relu(self.flow1(flows), act)
        f2 = F.leaky_relu(self.flow2(f1), act)
        f3 = F.leaky_relu(self.flow3(f2), act)
        return [c1, c2, flatten(c3)], flatten(f3)

    def _prior(self, condition: Tensor) -> tuple[Tensor, Tensor]:
        return self.prior_mu(condition), soft_clamp(self.prior_logvar(condition), self.logvar_limit)

    def _posterior(self, condition: Tensor, flow_feat: Tensor) -> tuple[Tensor, Tensor]:
        both = F.concat([condition, flow_feat], axis=1)
        return self.post_mu(both), soft_clamp(self.post_logvar(both), self.logvar_limit)

    def _decode(self, z: Tensor, cond: list[Tensor], flow_feat: Tensor) -> Tensor:
        act = self.slope
        c1, c2, condition = cond
        h = self.dec_in(F.concat([z, condition, flow_feat], axis=1))
        h = F.leaky_relu(h.reshape(z.shape[0], *self.bottleneck), act)
        h = F.leaky_relu(self.dec3(h), act) + c2
        h = F.leaky_relu(self.dec2(h), act) + c1
        return F.sigmoid(self.dec1(h))

    def forward(
        self,
        images: Tensor,
        flows: Tensor,
        rng: Optional[np.random.Generator] = None,
        noise_factor: float = 1.0,
    ) -> CVAEOutput:
        """Training pass with a reparameterized posterior sample.

        Args:
            images: (N, t_len*3, S, S) observed crops
            flows: (N, (t_len-1)*2, S, S) reconstructed flows
            rng: Source of the standard normal noise
            noise_factor: Multiplies sigma; 0 makes ``z`` the posterior mean
        """
        self._check(images, flows)
        cond, flow_feat = self._encode(images, flows)
        mu0, logvar0 = self._prior(cond[-1])
        mu, logvar = self._posterior(cond[-1], flow_feat)
        if noise_factor == 0:
            z = mu
        else:
            rng = rng or np.random.default_rng(0)
            eps = rng.standard_normal(mu.shape) * noise_factor
            z = mu + F.exp(logvar * 0.5) * eps
        return CVAEOutput(self._decode(z, cond, flow_feat), mu, logvar, mu0, logvar0)

    def _predict(self, images: Tensor, flows: Tensor, mode: str = "prior-mean") -> Tensor:
        self._check(images, flows)
        cond, flow_feat = self._encode(images, flows)
        if mode == "prior-mean":
            z, _ = self._prior(cond[-1])
        else:
            z, _ = self._posterior(cond[-1], flow_feat)
        return self._decode(z, cond, flow_feat)

    def predict(self, images: np.ndarray, flows: np.ndarray, mode: str = "prior-mean") -> np.ndarray:
        """Deterministic next-crop prediction.

        ``prior-mean`` decodes the mean of the learned prior (scoring);
        ``posterior`` decodes the posterior mean (diagnostics).

        Raises:
            UntrainedModelError: If the model was never trained or loaded
            VadConfigError: On an unknown mode
        """
        if mode not in PREDICT_MODES:
            raise VadConfigError(f"Unknown prediction mode '{mode}'. Valid: {', '.join(PREDICT_MODES)}")
        self.check_trained()
        with no_grad():
            return self._predict(Tensor(images), Tensor(flows), mode).data.copy()


def cvae_forward_train(
    model: CVAE,
    images: Tensor,
    flows: Tensor,
    rng: Optional[np.random.Generator] = None,
    zero_sigma: bool = False,
) -> CVAEOutput:
    """Training pass; ``zero_sigma`` replaces the sample by the posterior mean."""
    return model(images, flows, rng=rng, noise_factor=0.0 if zero_sigma else 1.0)


def cvae_predict(
    model: CVAE, images: np.ndarray, flows: np.ndarray, mode: str = "prior-mean"
) -> np.ndarray:
    return model.predict(images, flows, mode)


def cvae_loss(out: CVAEOutput, target: Tensor | np.ndarray, beta: float) -> tuple[Tensor, dict[str, float]]:
    """Prediction MSE plus ``beta`` times KL(posterior || prior).

    The KL is summed over latent dimensions and averaged over the batch.
    """
    prediction = F.mse(out.prediction, target)
    kl = F.kl_diag_gaussian(out.mu, out.logvar, out.mu0, out.logvar0)
    return prediction + kl * beta, {"prediction": prediction.item(), "kl": kl.item()}
