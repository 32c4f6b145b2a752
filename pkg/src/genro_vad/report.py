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

"""Report bundle: CSV tables and grayscale heatmap snapshots.

Everything is rendered from ``eval/metrics.json`` and the per-condition
score files, so a report can be regenerated without touching the models.

Bundle layout (under ``report/``)::

    metrics.csv                     one row per condition and subset
    per_scenario.csv                per-scenario frame AUROC
    roc_<condition>.csv             pooled ROC points
    timeline_<scenario>.csv         frame scores of every condition
    heatmap_<scenario>_<frame>.pgm  pixel maps of the top-scoring frames
    premise.json                    copy of the error-premise summary
"""

from __future__ import annotations

import csv
import io
import logging
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff.container import load_tensors
from .config import RunConfig
from .exceptions import UndefinedMetricError
from .metrics import roc_curve
from .scene import ScenarioConfig
from .storage import RunStorage

logger = logging.getLogger(__name__)

REPORT_DIR = "report"

METRIC_COLUMNS = (
    "condition",
    "subset",
    "scenarios",
    "frames",
    "anomalous_frames",
    "auroc",
    "frame_fpr95",
    "pixel_fpr95",
    "box_iou",
)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(
    storage: RunStorage, path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]
) -> None:
    """Write a CSV table with ``\\n`` line endings; ``None`` cells stay empty."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    storage.write_text(path, buffer.getvalue())


def heatmap_image(amap: np.ndarray) -> bytes:
    """Encode a non-negative map as an 8-bit grayscale PGM scaled by its maximum."""
    amap = np.maximum(np.asarray(amap, dtype=np.float64), 0.0)
    peak = float(amap.max()) if amap.size else 0.0
    scaled = amap / peak * 255.0 if peak > 0 else np.zeros_like(amap)
    pixels = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def top_frames(scores: Sequence[float], count: int) -> list[int]:
    """Indices of the ``count`` highest scores; ties go to the earlier frame.

    Examples:
        >>> top_frames([0.1, 0.5, 0.5, 0.2], 2)
        [1, 2]
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:count])


def write_report(
    storage: RunStorage,
    config: RunConfig,
    conditions: Sequence[str],
    scenarios: Sequence[ScenarioConfig],
) -> list[str]:
    """Render the report bundle of an evaluated run.

    Args:
        storage: Run directory
        config: Resolved run configuration
        conditions: Scored condition names, in report order
        scenarios: Test scenarios

    Returns:
        Paths of the written files

    Raises:
        MissingPrerequisiteError: If ``eval`` has not run
    """
    storage.require("eval/metrics.json", "eval")
    metrics = storage.read_json("eval/metrics.json")
    outputs = []

    path = f"{REPORT_DIR}/metrics.csv"
    write_csv(
        storage,
        path,
        METRIC_COLUMNS,
        [[row.get(col) for col in METRIC_COLUMNS] for row in metrics["rows"]],
    )
    outputs.append(path)

    path = f"{REPORT_DIR}/per_scenario.csv"
    rows = [
        [name, scenario_id, value]
        for name, values in metrics["per_scenario"].items()
        for scenario_id, value in sorted(values.items())
    ]
    write_csv(storage, path, ("condition", "scenario", "auroc"), rows)
    outputs.append(path)

    scores: dict[str, dict[str, dict[str, Any]]] = {}
    for name in conditions:
        scores[name] = {
            cfg.scenario_id: storage.read_json(f"scores/{name}/{cfg.scenario_id}/scores.json")
            for cfg in scenarios
        }
        path = _write_roc(storage, name, scores[name])
        if path:
            outputs.append(path)

    for cfg in scenarios:
        outputs.extend(_write_timeline(storage, cfg.scenario_id, conditions, scores))

    if conditions and config.eval.heatmaps_per_scenario:
        first = conditions[0]
        for cfg in scenarios:
            outputs.extend(
                _write_heatmaps(
                    storage,
                    first,
                    cfg.scenario_id,
                    scores[first][cfg.scenario_id]["frame_scores"],
                    config.eval.heatmaps_per_scenario,
                )
            )

    if storage.exists("eval/premise.json"):
        storage.copy("eval/premise.json", f"{REPORT_DIR}/premise.json")
        outputs.append(f"{REPORT_DIR}/premise.json")
    logger.info("Report written: %d files", len(outputs))
    return outputs


def _write_roc(storage: RunStorage, name: str, per_scenario: dict[str, dict[str, Any]]) -> Optional[str]:
    values = list(per_scenario.values())
    scores = np.concatenate([np.asarray(v["frame_scores"], dtype=np.float64) for v in values])
    labels = np.concatenate([np.asarray(v["labels"], dtype=bool) for v in values])
    try:
        curve = roc_curve(scores, labels)
    except UndefinedMetricError as e:
        logger.warning("No ROC for condition '%s': %s", name, e)
        return None
    path = f"{REPORT_DIR}/roc_{name}.csv"
    rows = [
        ["inf" if np.isinf(t) else float(t), float(tp), float(fp)]
        for t, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr)
    ]
    write_csv(storage, path, ("threshold", "tpr", "fpr"), rows)
    return path


def _write_timeline(
    storage: RunStorage,
    scenario_id: str,
    conditions: Sequence[str],
    scores: dict[str, dict[str, dict[str, Any]]],
) -> list[str]:
    if not conditions:
        return []
    labels = scores[conditions[0]][scenario_id]["labels"]
    columns = [scores[name][scenario_id]["frame_scores"] for name in conditions]
    rows = [
        [frame, int(bool(label))] + [float(column[frame]) for column in columns]
        for frame, label in enumerate(labels)
    ]
    path = f"{REPORT_DIR}/timeline_{scenario_id}.csv"
    write_csv(storage, path, ["frame", "anomaly", *conditions], rows)
    return [path]


def _write_heatmaps(
    storage: RunStorage, condition: str, scenario_id: str, frame_scores: Sequence[float], count: int
) -> list[str]:
    maps = load_tensors(storage, f"scores/{condition}/{scenario_id}/maps.vadt")["maps"]
    paths = []
    for frame in top_frames(frame_scores, count):
        path = f"{REPORT_DIR}/heatmap_{scenario_id}_{frame:04d}.pgm"
        storage.write_bytes(path, heatmap_image(maps[frame]))
        paths.append(path)
    return paths
