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

"""Axis-aligned pixel boxes and box-set geometry."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable, Sequence

import numpy as np

from .exceptions import VadConfigError

GROUND_TRUTH = "ground-truth"
DETECTED = "detected"


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x_min, x_max) x [y_min, y_max)``.

    Attributes:
        x_min, y_min, x_max, y_max: Integer pixel bounds
        track_id: Stable identity of the object across frames
        cls: Object class tag (always ``vehicle`` here)
        provenance: ``ground-truth`` or ``detected``

    Examples:
        >>> a = BBox(0, 0, 10, 10, track_id=1)
        >>> b = BBox(5, 0, 15, 10, track_id=1)
        >>> round(a.iou(b), 4)
        0.3333
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    track_id: int = 0
    cls: str = "vehicle"
    provenance: str = GROUND_TRUTH

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise VadConfigError(
                f"Empty box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )
        if self.provenance not in (GROUND_TRUTH, DETECTED):
            raise VadConfigError(f"Unknown box provenance '{self.provenance}'")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection(self, other: BBox) -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(w, 0) * max(h, 0)

    def iou(self, other: BBox) -> float:
        inter = self.intersection(other)
        return inter / float(self.area + other.area - inter)

    def with_track(self, track_id: int) -> BBox:
        return replace(self, track_id=track_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
            "track_id": self.track_id,
            "class": self.cls,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BBox:
        return cls(
            int(data["x_min"]),
            int(data["y_min"]),
            int(data["x_max"]),
            int(data["y_max"]),
            track_id=int(data.get("track_id", 0)),
            cls=data.get("class", "vehicle"),
            provenance=data.get("provenance", GROUND_TRUTH),
        )


def clip_box(
    x0: float, y0: float, x1: float, y1: float, height: int, width: int, **fields: Any
) -> BBox | None:
    """Round real corners to the pixels whose centres they cover and clip to the frame.

    Returns None when nothing of the box is left inside the frame.
    """
    x_min = max(int(np.ceil(x0 - 0.5)), 0)
    y_min = max(int(np.ceil(y0 - 0.5)), 0)
    x_max = min(int(np.ceil(x1 - 0.5)), width)
    y_max = min(int(np.ceil(y1 - 0.5)), height)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BBox(x_min, y_min, x_max, y_max, **fields)


def union_mask(boxes: Iterable[BBox], height: int, width: int) -> np.ndarray:
    """Boolean (height, width) mask of the union of boxes."""
    mask = np.zeros((height, width), dtype=bool)
    for box in boxes:
        mask[box.y_min : box.y_max, box.x_min : box.x_max] = True
    return mask


def boxes_to_json(frames: Sequence[Sequence[BBox]]) -> list[list[dict[str, Any]]]:
    return [[box.to_dict() for box in boxes] for boxes in frames]


def boxes_from_json(data: Sequence[Sequence[dict[str, Any]]]) -> list[list[BBox]]:
    return [[BBox.from_dict(item) for item in boxes] for boxes in data]
