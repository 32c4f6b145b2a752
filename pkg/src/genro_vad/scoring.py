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

"""Anomaly scores from cube errors.

Two errors are measured per cube: the flow reconstruction error of the
memory autoencoder (``S_r``) and the next-frame prediction error of the
conditional VAE (``S_p``). The frame score standardizes both with
statistics of normal training cubes and fuses them::

    S_f = w_r * (S_r - mu_r) / sigma_r + w_p * (S_p - mu_p) / sigma_p

taking the maximum over the cubes of a frame. Pixel scores robust-scale the
per-pixel squared errors with the calibration median and IQR, average them
over channels and fuse them with ``w_rp``/``w_pp``; they are scattered into
the object boxes and are zero everywhere else.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import TYPE_CHECKING, Any, Iterable, Sequence, Tuple

import numpy as np

from .boxes import BBox
from .cubes import AnomalyMap, CubeBatch, STCube, scatter_patch, stack_cubes
from .exceptions import DimensionError, UndefinedMetricError, VadConfigError

if TYPE_CHECKING:
    from .models.cvae import CVAE
    from .models.memae import MemAE

logger = logging.getLogger(__name__)

EPS = 1e-8

__all__ = [
    "EPS",
    "ScoreWeights",
    "TrainStats",
    "CubeErrors",
    "AnomalyMap",
    "errors_from_outputs",
    "batch_errors",
    "cube_errors",
    "calibrate",
    "cube_scores",
    "frame_score",
    "robust_scale",
    "pixel_score_patch",
    "frame_pixel_map",
]


@dataclass(frozen=True)
class ScoreWeights:
    """Fusion weights of the frame-wise and pixel-wise scores.

    Attributes:
        w_r: Frame-wise weight of the flow reconstruction error
        w_p: Frame-wise weight of the frame prediction error
        w_rp: Pixel-wise weight of the flow reconstruction error
        w_pp: Pixel-wise weight of the frame prediction error

    Examples:
        >>> ScoreWeights.parse("0.1,10")
        ScoreWeights(w_r=0.1, w_p=10.0, w_rp=0.1, w_pp=10.0)
    """

    w_r: float = 10.0
    w_p: float = 0.1
    w_rp: float = 10.0
    w_pp: float = 0.1

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise VadConfigError(f"Score weight {name} must be >= 0, got {value}")

    @classmethod
    def parse(cls, text: str) -> ScoreWeights:
        """Parse ``w_r,w_p`` or ``w_r,w_p,w_rp,w_pp``.

        With two values the pixel-wise weights repeat the frame-wise ones.
        """
        try:
            values = [float(part) for part in text.split(",")]
        except ValueError as e:
            raise VadConfigError(f"Invalid weights '{text}': {e}") from e
        if len(values) == 2:
            values = values * 2
        if len(values) != 4:
            raise VadConfigError(f"Expected 2 or 4 comma-separated weights, got '{text}'")
        return cls(*values)

    def flow_only(self) -> ScoreWeights:
        """Same weights with the prediction terms switched off."""
        return replace(self, w_p=0.0, w_pp=0.0)

    @property
    def label(self) -> str:
        return f"{self.w_r:g}/{self.w_p:g}/{self.w_rp:g}/{self.w_pp:g}"


@dataclass(frozen=True)
class TrainStats:
    """Calibration statistics of normal training cubes.

    ``median_*`` and ``iqr_*`` hold one value per channel of the error
    source (2 for flow, 3 for image). Spreads are floored at ``EPS``.
    """

    mu_r: float
    sigma_r: float
    mu_p: float
    sigma_p: float
    median_r: Tuple[float, ...]
    iqr_r: Tuple[float, ...]
    median_p: Tuple[float, ...]
    iqr_p: Tuple[float, ...]
    num_cubes: int = 0
    model_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("median_r", "iqr_r", "median_p", "iqr_p"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainStats:
        return cls(
            mu_r=float(data["mu_r"]),
            sigma_r=float(data["sigma_r"]),
            mu_p=float(data["mu_p"]),
            sigma_p=float(data["sigma_p"]),
            median_r=tuple(float(v) for v in data["median_r"]),
            iqr_r=tuple(float(v) for v in data["iqr_r"]),
            median_p=tuple(float(v) for v in data["median_p"]),
            iqr_p=tuple(float(v) for v in data["iqr_p"]),
            num_cubes=int(data.get("num_cubes", 0)),
            model_hash=str(data.get("model_hash", "")),
        )


@dataclass
class CubeErrors:
    """Errors of a batch of cubes.

    Attributes:
        s_r: (N,) mean squared flow reconstruction error per cube
        s_p: (N,) mean squared prediction error per cube
        e_r: (N, 2, S, S) squared flow error averaged over the window steps
        e_p: (N, 3, S, S) squared prediction error
    """

    s_r: np.ndarray
    s_p: np.ndarray
    e_r: np.ndarray
    e_p: np.ndarray

    def __len__(self) -> int:
        return len(self.s_r)

    @classmethod
    def concatenate(cls, parts: Sequence[CubeErrors]) -> CubeErrors:
        return cls(
            s_r=np.concatenate([p.s_r for p in parts]),
            s_p=np.concatenate([p.s_p for p in parts]),
            e_r=np.concatenate([p.e_r for p in parts]),
            e_p=np.concatenate([p.e_p for p in parts]),
        )


def errors_from_outputs(
    flows: np.ndarray, reconstruction: np.ndarray, targets: np.ndarray, prediction: np.ndarray
) -> CubeErrors:
    """Measure cube errors from model inputs and outputs.

    Args:
        flows: (N, (t_len-1)*2, S, S) observed flow crops
        reconstruction: Same shape, autoencoder output
        targets: (N, 3, S, S) observed next-frame crops
        prediction: Same shape, predicted next-frame crops

    Examples:
        >>> y = np.zeros((1, 6, 4, 4))
        >>> x = np.zeros((1, 3, 4, 4))
        >>> float(errors_from_outputs(y, y + 0.5, x, x).s_r[0])
        0.25
    """
    flows = np.asarray(flows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sq_r = (np.asarray(reconstruction, dtype=np.float64) - flows) ** 2
    sq_p = (np.asarray(prediction, dtype=np.float64) - targets) ** 2
    n, channels, height, width = sq_r.shape
    return CubeErrors(
        s_r=sq_r.reshape(n, -1).mean(axis=1),
        s_p=sq_p.reshape(n, -1).mean(axis=1),
        e_r=sq_r.reshape(n, channels // 2, 2, height, width).mean(axis=1),
        e_p=sq_p,
    )


def batch_errors(batch: CubeBatch, memae: MemAE, cvae: CVAE, chunk: int = 64) -> CubeErrors:
    """Run both models in inference mode over a cube batch."""
    parts = []
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        reconstruction = memae.reconstruct(part.flows)
        prediction = cvae.predict(part.images, reconstruction, mode="prior-mean")
        parts.append(errors_from_outputs(part.flows, reconstruction, part.targets, prediction))
    return CubeErrors.concatenate(parts)


def cube_errors(
    stc: STCube, memae: MemAE, cvae: CVAE
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """``(S_r, S_p, e_r, e_p)`` of a single cube.

    Raises:
        UntrainedModelError: If either model was never trained or loaded
    """
    errors = batch_errors(stack_cubes([stc]), memae, cvae)
    return float(errors.s_r[0]), float(errors.s_p[0]), errors.e_r[0], errors.e_p[0]


def _robust_stats(errors: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    medians, iqrs = [], []
    for channel in range(errors.shape[1]):
        q25, q50, q75 = np.percentile(errors[:, channel].ravel(), [25.0, 50.0, 75.0])
        medians.append(float(q50))
        iqrs.append(max(float(q75 - q25), EPS))
    return tuple(medians), tuple(iqrs)


def calibrate(errors: CubeErrors, model_hash: str = "") -> TrainStats:
    """Standardization and robust-scaling statistics from normal cubes.

    Means and population standard deviations of the cube scores; medians and
    IQRs (``Q75 - Q25``, linear interpolation between order statistics) of
    the pooled per-pixel errors, one per channel.

    Raises:
        UndefinedMetricError: If there are no cubes
    """
    if len(errors) == 0:
        raise UndefinedMetricError("Cannot calibrate on an empty set of cubes")
    median_r, iqr_r = _robust_stats(errors.e_r)
    median_p, iqr_p = _robust_stats(errors.e_p)
    stats = TrainStats(
        mu_r=float(np.mean(errors.s_r)),
        sigma_r=max(float(np.std(errors.s_r)), EPS),
        mu_p=float(np.mean(errors.s_p)),
        sigma_p=max(float(np.std(errors.s_p)), EPS),
        median_r=median_r,
        iqr_r=iqr_r,
        median_p=median_p,
        iqr_p=iqr_p,
        num_cubes=len(errors),
        model_hash=model_hash,
    )
    logger.info(
        "Calibrated on %d cubes: mu_r=%.6g sigma_r=%.6g mu_p=%.6g sigma_p=%.6g",
        stats.num_cubes,
        stats.mu_r,
        stats.sigma_r,
        stats.mu_p,
        stats.sigma_p,
    )
    return stats


def cube_scores(
    s_r: np.ndarray | float, s_p: np.ndarray | float, stats: TrainStats, weights: ScoreWeights
) -> np.ndarray:
    """Standardized weighted fusion of the two cube errors (signed)."""
    z_r = (np.asarray(s_r, dtype=np.float64) - stats.mu_r) / stats.sigma_r
    z_p = (np.asarray(s_p, dtype=np.float64) - stats.mu_p) / stats.sigma_p
    return weights.w_r * z_r + weights.w_p * z_p


def frame_score(
    errors: Iterable[tuple[float, float]], stats: TrainStats, weights: ScoreWeights
) -> float:
    """Largest cube score of a frame; 0.0 for a frame without cubes.

    Examples:
        >>> stats = TrainStats(1.0, 1.0, 1.0, 1.0, (0, 0), (1, 1), (0, 0, 0), (1, 1, 1))
        >>> frame_score([(2.0, 1.0)], stats, ScoreWeights(10, 0.1, 10, 0.1))
        10.0
        >>> frame_score([], stats, ScoreWeights())
        0.0
    """
    pairs = list(errors)
    if not pairs:
        return 0.0
    s_r, s_p = np.array(pairs, dtype=np.float64).T
    return float(np.max(cube_scores(s_r, s_p, stats, weights)))


def robust_scale(x: Any, median: Any, iqr: Any) -> Any:
    """``(x - median) / iqr`` with the IQR floored at ``EPS``.

    Examples:
        >>> robust_scale(5.0, 3.0, 2.0)
        1.0
    """
    result = (np.asarray(x, dtype=np.float64) - median) / np.maximum(iqr, EPS)
    return float(result) if np.ndim(result) == 0 else result


def _channel_mean(errors: np.ndarray, medians: Sequence[float], iqrs: Sequence[float]) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    median = np.asarray(medians, dtype=np.float64)[:, None, None]
    iqr = np.asarray(iqrs, dtype=np.float64)[:, None, None]
    return robust_scale(errors, median, iqr).mean(axis=0)


def pixel_score_patch(
    e_r: np.ndarray, e_p: np.ndarray, stats: TrainStats, weights: ScoreWeights
) -> np.ndarray:
    """Pixel-wise score of one cube (signed, same spatial size as the cube).

    Args:
        e_r: (2, S, S) squared flow reconstruction errors
        e_p: (3, S, S) squared prediction errors
    """
    if e_r.shape[-2:] != e_p.shape[-2:]:
        raise DimensionError(f"Error patches differ in size: {e_r.shape} vs {e_p.shape}")
    m_r = _channel_mean(e_r, stats.median_r, stats.iqr_r)
    m_p = _channel_mean(e_p, stats.median_p, stats.iqr_p)
    return weights.w_rp * m_r + weights.w_pp * m_p


def frame_pixel_map(
    height: int,
    width: int,
    boxes: Sequence[BBox],
    patches: Sequence[np.ndarray],
    score: float = 0.0,
) -> AnomalyMap:
    """Scatter clamped cube patches into their boxes and attach the frame score.

    Raises:
        DimensionError: If boxes and patches differ in number
    """
    if len(boxes) != len(patches):
        raise DimensionError(f"Got {len(boxes)} boxes for {len(patches)} patches")
    amap = AnomalyMap.empty(height, width)
    for box, patch in zip(boxes, patches):
        amap = scatter_patch(amap, box, np.maximum(patch, 0.0))
    return replace(amap, frame_score=float(score))
