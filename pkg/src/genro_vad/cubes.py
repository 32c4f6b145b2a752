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

"""Boxes in, spatiotemporal cubes out, patches back into frames.

The detector stub degrades ground-truth boxes the way an off-the-shelf
detector would: it drops boxes (more often for small, distant objects),
biases their size and jitters their corners. Track identities for detected
boxes come from greedy IoU linking between consecutive frames.

A cube for frame ``t`` stacks ``t_len`` past frames, the ``t_len - 1``
flows between them and the target frame ``t + 1``. All crops of a cube use
one region, the track's box in the target frame, resized to ``size x size``;
flow vectors are rescaled with the crop so displacements stay consistent in
cube coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, Optional, Sequence

import numpy as np

from .autodiff.functional import resize_array
from .boxes import DETECTED, BBox
from .exceptions import DimensionError, VadConfigError

logger = logging.getLogger(__name__)

LINK_IOU = 0.3


@dataclass(frozen=True)
class DetectorStub:
    """Controlled degradation of ground-truth boxes.

    Attributes:
        miss_rate: Probability of dropping a box
        jitter: Standard deviation (px) of the Gaussian corner noise
        size_bias: Multiplicative width/height bias around the box centre
        distance_miss_boost: Extra drop probability for boxes smaller than
            ``small_area`` pixels
        small_area: Area threshold for the boost
        seed: Base seed; draws are keyed by (seed, frame, track)
        track_miss_rate: Per-track drop probability replacing ``miss_rate``
    """

    miss_rate: float = 0.0
    jitter: float = 0.0
    size_bias: float = 1.0
    distance_miss_boost: float = 0.0
    small_area: int = 150
    seed: int = 0
    track_miss_rate: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("miss_rate", "distance_miss_boost"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise VadConfigError(f"detector.{name} must lie in [0, 1], got {value}")
        for track, value in self.track_miss_rate.items():
            if not 0.0 <= value <= 1.0:
                raise VadConfigError(f"detector.track_miss_rate[{track}] must lie in [0, 1]")
        if self.jitter < 0:
            raise VadConfigError("detector.jitter must be >= 0")
        if self.size_bias <= 0:
            raise VadConfigError("detector.size_bias must be positive")
        if self.small_area < 0:
            raise VadConfigError("detector.small_area must be >= 0")

    def miss_probability(self, box: BBox) -> float:
        p = self.track_miss_rate.get(box.track_id, self.miss_rate)
        if box.area < self.small_area:
            p += self.distance_miss_boost
        return min(p, 1.0)


def detect_boxes(
    gt_boxes: Sequence[BBox], stub: DetectorStub, frame_index: int, height: int, width: int
) -> list[BBox]:
    """Degrade one frame's ground-truth boxes.

    Each box is dropped independently, then scaled by ``size_bias`` around
    its centre, jittered corner by corner and clipped to the frame. Draws
    depend only on ``(stub.seed, frame_index, track_id)``.

    Examples:
        >>> boxes = [BBox(10, 10, 30, 26, track_id=0)]
        >>> [b.provenance for b in detect_boxes(boxes, DetectorStub(), 0, 64, 64)]
        ['detected']
    """
    detected = []
    for box in gt_boxes:
        rng = np.random.default_rng([stub.seed, frame_index, box.track_id])
        if rng.random() < stub.miss_probability(box):
            continue
        cx = (box.x_min + box.x_max) / 2.0
        cy = (box.y_min + box.y_max) / 2.0
        half_w = box.width * stub.size_bias / 2.0
        half_h = box.height * stub.size_bias / 2.0
        corners = np.array([cx - half_w, cy - half_h, cx + half_w, cy + half_h])
        if stub.jitter > 0:
            corners = corners + rng.normal(0.0, stub.jitter, size=4)
        x0, y0, x1, y1 = (int(np.round(c)) for c in corners)
        x0, x1 = max(x0, 0), min(x1, width)
        y0, y1 = max(y0, 0), min(y1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        detected.append(BBox(x0, y0, x1, y1, track_id=box.track_id, provenance=DETECTED))
    return detected


def link_tracks(frames: Sequence[Sequence[BBox]], iou_threshold: float = LINK_IOU) -> list[list[BBox]]:
    """Assign track ids by greedy max-IoU matching to the previous frame.

    Pairs are taken in descending IoU order, each box used once; boxes
    without a match at or above ``iou_threshold`` start a new track.
    """
    linked: list[list[BBox]] = []
    previous: list[BBox] = []
    next_id = 0
    for boxes in frames:
        candidates = []
        for i, prev in enumerate(previous):
            for j, box in enumerate(boxes):
                overlap = prev.iou(box)
                if overlap >= iou_threshold:
                    candidates.append((-overlap, i, j))
        candidates.sort()
        assigned: dict[int, int] = {}
        used: set[int] = set()
        for _, i, j in candidates:
            if i in used or j in assigned:
                continue
            assigned[j] = previous[i].track_id
            used.add(i)
        current = []
        for j, box in enumerate(boxes):
            track = assigned.get(j)
            if track is None:
                track = next_id
                next_id += 1
            current.append(box.with_track(track))
        next_id = max([next_id] + [b.track_id + 1 for b in current])
        linked.append(current)
        previous = current
    return linked


def detect_sequence(
    gt_frames: Sequence[Sequence[BBox]], stub: DetectorStub, height: int, width: int
) -> list[list[BBox]]:
    """Detector stub on every frame followed by track linking."""
    raw = [detect_boxes(boxes, stub, t, height, width) for t, boxes in enumerate(gt_frames)]
    return link_tracks(raw)


# ---------------------------------------------------------------------- cubes


@dataclass
class STCube:
    """One object's spatiotemporal cube.

    Attributes:
        track_id: Track the cube belongs to
        frame_index: Last observed frame ``t``; the target is ``t + 1``
        img_window: (t_len, 3, S, S) crops of frames t-t_len+1 .. t
        flow_window: (t_len-1, 2, S, S) crops of the flows between them
        target_img: (3, S, S) crop of frame t+1
        box_at_t: The track's box at frame t
        box_at_t1: The track's box at frame t+1 (the crop region)
    """

    track_id: int
    frame_index: int
    img_window: np.ndarray
    flow_window: np.ndarray
    target_img: np.ndarray
    box_at_t: BBox
    box_at_t1: BBox

    @property
    def target_frame(self) -> int:
        return self.frame_index + 1


def _region(box: BBox, margin: float, height: int, width: int) -> tuple[int, int, int, int]:
    if margin <= 0:
        return box.x_min, box.y_min, box.x_max, box.y_max
    dx = int(round(box.width * margin / 2.0))
    dy = int(round(box.height * margin / 2.0))
    return (
        max(box.x_min - dx, 0),
        max(box.y_min - dy, 0),
        min(box.x_max + dx, width),
        min(box.y_max + dy, height),
    )


def crop_image(frame: np.ndarray, region: tuple[int, int, int, int], size: int) -> np.ndarray:
    """Crop an (H, W, 3) frame to ``region`` and resize to (3, size, size)."""
    x0, y0, x1, y1 = region
    patch = np.ascontiguousarray(frame[y0:y1, x0:x1].transpose(2, 0, 1), dtype=np.float32)
    return resize_array(patch, size, size)


def crop_flow(flow: np.ndarray, region: tuple[int, int, int, int], size: int) -> np.ndarray:
    """Crop a (2, H, W) flow to ``region``, resize and rescale its vectors."""
    x0, y0, x1, y1 = region
    patch = resize_array(np.ascontiguousarray(flow[:, y0:y1, x0:x1], dtype=np.float32), size, size)
    patch[0] *= size / float(x1 - x0)
    patch[1] *= size / float(y1 - y0)
    return patch


def _track_box(boxes: Sequence[BBox], track_id: int) -> Optional[BBox]:
    for box in boxes:
        if box.track_id == track_id:
            return box
    return None


def extract_stc(
    frames: np.ndarray,
    flows: np.ndarray,
    tracks: Sequence[Sequence[BBox]],
    t: int,
    t_len: int,
    size: int = 32,
    margin: float = 0.0,
    min_side: int = 2,
) -> list[STCube]:
    """Build the cubes of every track observed in frames t-t_len+1 .. t+1.

    Args:
        frames: (T, H, W, 3) frames in [0, 1]
        flows: (T-1, 2, H, W) flows, ``flows[k]`` from frame k to k+1
        tracks: Per-frame boxes with track ids
        t: Last observed frame
        t_len: Number of observed frames per cube

    Raises:
        DimensionError: If ``t`` leaves no room for the window or the target
    """
    num_frames, height, width = frames.shape[:3]
    if t < t_len - 1 or t + 1 >= num_frames:
        raise DimensionError(
            f"Frame {t} cannot anchor a cube of {t_len} frames in a clip of {num_frames}"
        )
    first = t - t_len + 1
    cubes = []
    for target_box in tracks[t + 1]:
        track = target_box.track_id
        window = [_track_box(tracks[k], track) for k in range(first, t + 1)]
        if any(box is None for box in window):
            continue
        region = _region(target_box, 0.0 if margin is None else margin, height, width)
        if region[2] - region[0] < min_side or region[3] - region[1] < min_side:
            logger.warning(
                "Skipping track %d at frame %d: degenerate box %s", track, t + 1, region
            )
            continue
        cubes.append(
            STCube(
                track_id=track,
                frame_index=t,
                img_window=np.stack([crop_image(frames[k], region, size) for k in range(first, t + 1)]),
                flow_window=np.stack([crop_flow(flows[k], region, size) for k in range(first, t)]),
                target_img=crop_image(frames[t + 1], region, size),
                box_at_t=window[-1],
                box_at_t1=target_box,
            )
        )
    return cubes


def iter_cubes(
    frames: np.ndarray,
    flows: np.ndarray,
    tracks: Sequence[Sequence[BBox]],
    t_len: int,
    size: int = 32,
    margin: float = 0.0,
    min_side: int = 2,
    stride: int = 1,
) -> Iterator[STCube]:
    """All cubes of a clip, anchoring frames taken every ``stride`` frames."""
    for t in range(t_len - 1, len(frames) - 1, stride):
        yield from extract_stc(frames, flows, tracks, t, t_len, size, margin, min_side)


@dataclass
class CubeBatch:
    """Network-ready arrays for a list of cubes.

    Attributes:
        images: (N, t_len*3, S, S) observed crops, channels ordered by time
        flows: (N, (t_len-1)*2, S, S) flow crops
        targets: (N, 3, S, S) target crops
    """

    images: np.ndarray
    flows: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def take(self, index: np.ndarray) -> CubeBatch:
        return CubeBatch(self.images[index], self.flows[index], self.targets[index])


def stack_cubes(cubes: Sequence[STCube]) -> CubeBatch:
    if not cubes:
        raise DimensionError("Cannot stack an empty list of cubes")
    n = len(cubes)
    return CubeBatch(
        images=np.stack([c.img_window for c in cubes]).reshape(n, -1, *cubes[0].target_img.shape[1:]),
        flows=np.stack([c.flow_window for c in cubes]).reshape(n, -1, *cubes[0].target_img.shape[1:]),
        targets=np.stack([c.target_img for c in cubes]),
    )


# ---------------------------------------------------------------------- maps


@dataclass
class AnomalyMap:
    """Per-frame pixel scores; pixels outside every scattered box stay 0.

    Attributes:
        scores: (H, W) score field
        covered: (H, W) mask of pixels inside at least one scattered box
        frame_score: Frame-level score attached by the scoring stage
    """

    scores: np.ndarray
    covered: np.ndarray
    frame_score: float = 0.0

    @classmethod
    def empty(cls, height: int, width: int) -> AnomalyMap:
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    def clamped(self) -> np.ndarray:
        """Non-negative score field."""
        return np.maximum(self.scores, 0.0)


def scatter_patch(amap: AnomalyMap, box: BBox, patch: np.ndarray) -> AnomalyMap:
    """Resize ``patch`` onto ``box`` and merge it into the map by per-pixel max."""
    height, width = amap.scores.shape
    x0, y0 = max(box.x_min, 0), max(box.y_min, 0)
    x1, y1 = min(box.x_max, width), min(box.y_max, height)
    scores = amap.scores.copy()
    covered = amap.covered.copy()
    if x0 >= x1 or y0 >= y1:
        return replace(amap, scores=scores, covered=covered)
    resized = resize_array(np.asarray(patch, dtype=np.float64), box.height, box.width)
    resized = resized[y0 - box.y_min : y1 - box.y_min, x0 - box.x_min : x1 - box.x_min]
    region = scores[y0:y1, x0:x1]
    seen = covered[y0:y1, x0:x1]
    scores[y0:y1, x0:x1] = np.where(seen, np.maximum(region, resized), resized)
    covered[y0:y1, x0:x1] = True
    return replace(amap, scores=scores, covered=covered)
