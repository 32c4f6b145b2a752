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

"""Dense optical flow: coarse-to-fine Horn-Schunck with warping.

Frames are converted to luma, presmoothed and stacked into a pyramid of
2x bilinear reductions. At each level the second image is warped by the
current estimate and the linearised brightness-constancy + quadratic
smoothness problem is solved by fixed-point (Jacobi) iterations::

    t = (Ix (u_avg - u0) + Iy (v_avg - v0) + It) / (alpha^2 + Ix^2 + Iy^2)
    u = u_avg - Ix t
    v = v_avg - Iy t

All stencils are mirror symmetric, so mirrored inputs give mirrored flow.
Identical frames give exactly zero flow.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .autodiff.functional import resize_array
from .config import FlowConfig
from .exceptions import DimensionError

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])

AVERAGING_KERNEL = np.array(
    [
        [1 / 12, 1 / 6, 1 / 12],
        [1 / 6, 0.0, 1 / 6],
        [1 / 12, 1 / 6, 1 / 12],
    ]
)

CENTRAL_DIFFERENCE = np.array([-0.5, 0.0, 0.5])
MIN_LEVEL_SIZE = 8


@dataclass
class FlowField:
    """Displacement from frame t to t+1 in pixels per frame."""

    u: np.ndarray
    v: np.ndarray

    def as_array(self) -> np.ndarray:
        """Stack as (2, H, W) float32."""
        return np.stack([self.u, self.v]).astype(np.float32)


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Luma of an (H, W, 3) frame; (H, W) input is returned as float64."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise DimensionError(f"Expected (H, W, 3) frame, got {frame.shape}")
    return frame @ LUMA


def _pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    pyramid = [image]
    for _ in range(levels - 1):
        h, w = pyramid[-1].shape
        if min(h, w) // 2 < MIN_LEVEL_SIZE:
            break
        pyramid.append(resize_array(pyramid[-1], h // 2, w // 2))
    return pyramid


def _warp(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rows, cols = np.indices(image.shape, dtype=np.float64)
    return ndimage.map_coordinates(image, [rows + v, cols + u], order=1, mode="nearest")


def _gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ix = ndimage.correlate1d(image, CENTRAL_DIFFERENCE, axis=1, mode="nearest")
    iy = ndimage.correlate1d(image, CENTRAL_DIFFERENCE, axis=0, mode="nearest")
    return ix, iy


def _refine(
    first: np.ndarray,
    second: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    alpha: float,
    iterations: int,
) -> tuple[np.ndarray, np.ndarray]:
    if np.any(u) or np.any(v):
        warped = _warp(second, u, v)
    else:
        warped = second
    ix1, iy1 = _gradients(first)
    ix2, iy2 = _gradients(warped)
    ix = 0.5 * (ix1 + ix2)
    iy = 0.5 * (iy1 + iy2)
    it = warped - first
    denom = alpha * alpha + ix * ix + iy * iy
    u0, v0 = u.copy(), v.copy()
    for _ in range(iterations):
        u_avg = ndimage.convolve(u, AVERAGING_KERNEL, mode="nearest")
        v_avg = ndimage.convolve(v, AVERAGING_KERNEL, mode="nearest")
        step = (ix * (u_avg - u0) + iy * (v_avg - v0) + it) / denom
        u = u_avg - ix * step
        v = v_avg - iy * step
    return u, v


def estimate_flow(
    frame_t: np.ndarray, frame_t1: np.ndarray, params: Optional[FlowConfig] = None
) -> FlowField:
    """Estimate the dense flow from ``frame_t`` to ``frame_t1``.

    Args:
        frame_t: (H, W, 3) or (H, W) image in [0, 1]
        frame_t1: Image of the same shape
        params: Pyramid levels, iterations per level, smoothness (alpha),
            presmoothing sigma and displacement clamp

    Raises:
        DimensionError: If the frames differ in shape
    """
    params = params or FlowConfig()
    if np.shape(frame_t) != np.shape(frame_t1):
        raise DimensionError(f"Frame shapes differ: {np.shape(frame_t)} vs {np.shape(frame_t1)}")
    first = to_gray(frame_t)
    second = to_gray(frame_t1)
    if params.presmooth_sigma > 0:
        first = ndimage.gaussian_filter(first, params.presmooth_sigma, mode="nearest")
        second = ndimage.gaussian_filter(second, params.presmooth_sigma, mode="nearest")

    pyr1 = _pyramid(first, params.levels)
    pyr2 = _pyramid(second, params.levels)
    u = np.zeros_like(pyr1[-1])
    v = np.zeros_like(pyr1[-1])
    for level in range(len(pyr1) - 1, -1, -1):
        h, w = pyr1[level].shape
        if u.shape != (h, w):
            u = resize_array(u, h, w) * (w / u.shape[1])
            v = resize_array(v, h, w) * (h / v.shape[0])
        u, v = _refine(pyr1[level], pyr2[level], u, v, params.smoothness, params.iterations)
        logger.debug("Flow level %d (%dx%d) done", level, h, w)

    return FlowField(*clamp_flow(u, v, params.max_displacement))


def clamp_flow(u: np.ndarray, v: np.ndarray, max_displacement: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale vectors longer than ``max_displacement`` back onto the limit."""
    magnitude = np.hypot(u, v)
    scale = np.minimum(1.0, max_displacement / np.maximum(magnitude, 1e-12))
    return u * scale, v * scale


def flow_magnitude_map(flow: Union[FlowField, np.ndarray]) -> np.ndarray:
    """Per-pixel displacement length ``sqrt(u^2 + v^2)``.

    Accepts a :class:`FlowField` or an array whose axis -3 holds (u, v).
    """
    if isinstance(flow, FlowField):
        return np.hypot(flow.u, flow.v)
    flow = np.asarray(flow)
    if flow.ndim < 3 or flow.shape[-3] != 2:
        raise DimensionError(f"Expected (..., 2, H, W) flow, got {flow.shape}")
    return np.hypot(flow[..., 0, :, :], flow[..., 1, :, :])


def _pair_flow(args: tuple[np.ndarray, np.ndarray, FlowConfig]) -> np.ndarray:
    first, second, params = args
    return estimate_flow(first, second, params).as_array()


def estimate_sequence(
    frames: np.ndarray, params: FlowConfig, executor: Optional[Executor] = None
) -> np.ndarray:
    """Flow between every pair of consecutive frames, shape (T-1, 2, H, W)."""
    pairs = [(frames[t], frames[t + 1], params) for t in range(len(frames) - 1)]
    if executor is None:
        results = [_pair_flow(pair) for pair in pairs]
    else:
        results = list(executor.map(_pair_flow, pairs, chunksize=8))
    if not results:
        return np.zeros((0, 2) + frames.shape[1:3], dtype=np.float32)
    return np.stack(results)


def clamp_motion(motion: np.ndarray, max_displacement: float) -> np.ndarray:
    """Apply the displacement clamp to a (T-1, 2, H, W) motion stack."""
    u, v = clamp_flow(motion[:, 0].astype(np.float64), motion[:, 1].astype(np.float64), max_displacement)
    return np.stack([u, v], axis=1).astype(np.float32)
