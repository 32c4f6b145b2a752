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

"""Frame-wise and pixel-wise detection metrics and box quality.

ROC curves group equal scores into one threshold, so the trapezoidal AUROC
equals the pairwise statistic ``P(pos > neg) + 0.5 * P(pos == neg)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score
from sklearn.metrics import roc_curve as _sk_roc_curve

from .boxes import BBox, union_mask
from .exceptions import DimensionError, UndefinedMetricError

TPR_TOLERANCE = 1e-12


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered by decreasing threshold, from (0, 0) to (1, 1).

    The first threshold is above every score.
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float


def _as_binary(scores: Sequence[float], labels: Sequence[bool]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def roc_curve(scores: Sequence[float], labels: Sequence[bool]) -> RocCurve:
    """ROC curve over every distinct score threshold.

    Raises:
        UndefinedMetricError: If only one class is present
    """
    scores, labels = _as_binary(scores, labels)
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise UndefinedMetricError(
            f"ROC undefined with {positives} positives out of {labels.size} samples"
        )
    fpr, tpr, thresholds = _sk_roc_curve(labels, scores, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = np.inf
    return RocCurve(thresholds, tpr, fpr, float(roc_auc_score(labels, scores)))


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Area under the ROC curve in [0, 1].

    Examples:
        >>> auroc([0.9, 0.8, 0.3, 0.2], [True, False, False, True])
        0.5
    """
    return roc_curve(scores, labels).auroc


def fpr_at_tpr(scores: Sequence[float], labels: Sequence[bool], target: float = 0.95) -> float:
    """False-positive rate at the highest threshold reaching ``target`` TPR.

    Thresholds are swept from high to low; the first one whose TPR is at
    least ``target`` decides. Without negatives the rate is 0.

    Raises:
        UndefinedMetricError: If there are no positives
    """
    scores, labels = _as_binary(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("FPR at TPR undefined without positives")
    if positives == labels.size:
        return 0.0
    curve = roc_curve(scores, labels)
    index = int(np.argmax(curve.tpr >= target - TPR_TOLERANCE))
    return float(curve.fpr[index])


def overlap_region(
    gt_boxes: Sequence[BBox], pred_boxes: Sequence[BBox], height: int, width: int
) -> np.ndarray:
    """Pixels inside both the ground-truth and the predicted box unions."""
    return union_mask(gt_boxes, height, width) & union_mask(pred_boxes, height, width)


def pixel_fpr95_overlap(
    maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    gt_boxes: Sequence[Sequence[BBox]],
    pred_boxes: Sequence[Sequence[BBox]],
    target: float = 0.95,
) -> float:
    """Pixel-wise FPR at ``target`` TPR pooled over the box-overlap area.

    Only pixels inside the union of ground-truth boxes and inside the union
    of predicted boxes of the same frame take part; their labels come from
    the ground-truth anomaly masks.

    Raises:
        UndefinedMetricError: If the overlap area is empty or holds no anomaly
    """
    if not (len(maps) == len(gt_masks) == len(gt_boxes) == len(pred_boxes)):
        raise DimensionError("maps, masks and box lists must cover the same frames")
    pooled_scores, pooled_labels = [], []
    for amap, mask, gt, pred in zip(maps, gt_masks, gt_boxes, pred_boxes):
        amap = np.asarray(amap)
        if amap.shape != np.shape(mask):
            raise DimensionError(f"Map {amap.shape} and mask {np.shape(mask)} differ")
        region = overlap_region(gt, pred, *amap.shape)
        pooled_scores.append(amap[region])
        pooled_labels.append(np.asarray(mask, dtype=bool)[region])
    scores = np.concatenate(pooled_scores) if pooled_scores else np.zeros(0)
    if scores.size == 0:
        raise UndefinedMetricError("Ground-truth and predicted boxes never overlap")
    return fpr_at_tpr(scores, np.concatenate(pooled_labels), target)


def match_boxes(gt: Sequence[BBox], pred: Sequence[BBox]) -> list[Optional[float]]:
    """Greedy one-to-one matching by descending IoU.

    Returns:
        The matched IoU of every ground-truth box (None when unmatched)
    """
    candidates = sorted(
        ((-g.iou(p), i, j) for i, g in enumerate(gt) for j, p in enumerate(pred) if g.intersection(p)),
    )
    matched: list[Optional[float]] = [None] * len(gt)
    used: set[int] = set()
    for neg_iou, i, j in candidates:
        if matched[i] is not None or j in used:
            continue
        matched[i] = -neg_iou
        used.add(j)
    return matched


def mean_box_iou(gt_boxes: Sequence[BBox], pred_boxes: Sequence[BBox]) -> float:
    """Mean IoU over ground-truth boxes; unmatched boxes count as 0.

    Two empty sets agree perfectly (1.0); predictions without ground truth
    score 0.0.

    Examples:
        >>> mean_box_iou([BBox(0, 0, 10, 10)], [BBox(5, 0, 15, 10)])
        0.3333333333333333
    """
    if not gt_boxes:
        return 1.0 if not pred_boxes else 0.0
    matched = match_boxes(gt_boxes, pred_boxes)
    return float(np.mean([m or 0.0 for m in matched]))


def pooled_box_iou(
    gt_frames: Sequence[Sequence[BBox]], pred_frames: Sequence[Sequence[BBox]]
) -> float:
    """Mean matched IoU over every ground-truth box of every frame."""
    values: list[float] = []
    for gt, pred in zip(gt_frames, pred_frames):
        values.extend(m or 0.0 for m in match_boxes(gt, pred))
    return float(np.mean(values)) if values else 1.0
