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

"""Pipeline stages over a run directory.

Run directory layout::

    config.yaml                         resolved configuration
    manifests/<stage>.json              stage manifests (config hash, inputs)
    data/...                            scenes, masks and ground truth (gen)
    flows/<split>/<scenario>.vadt       dense flows (flow)
    models/memae_stage1.vadt            flow autoencoder (train-flowae)
    models/cvae_stage2.vadt             predictor (train-cvae)
    models/{memae,cvae}_final.vadt      jointly fine-tuned pair (finetune)
    curves/<stage>.json                 loss curves
    calibration/<checkpoint>/stats.json training statistics (calibrate)
    errors/<checkpoint>/<boxes>/...     cached per-cube errors (score)
    scores/<condition>/<scenario>/      scores.json and maps.vadt (score)
    eval/metrics.json, eval/premise.json
    report/...                          CSV tables and PGM heatmaps (report)

Each stage records the hash of the configuration sections it depends on.
Later stages check the manifests of every upstream stage and refuse
artifacts produced under a different configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from pydantic_core import to_jsonable_python

from .autodiff.container import load_tensors, save_tensors
from .autodiff.tensor import set_precision
from .boxes import BBox, boxes_from_json, boxes_to_json
from .config import MODEL_SECTIONS, ConditionConfig, RunConfig, validate_config
from .cubes import CubeBatch, DetectorStub, detect_sequence, iter_cubes, stack_cubes
from .exceptions import MissingPrerequisiteError, UndefinedMetricError, VadConfigError
from .flow import clamp_motion, estimate_sequence
from .metrics import auroc, fpr_at_tpr, pixel_fpr95_overlap, pooled_box_iou
from .models import CVAE, MemAE, load_module, save_module
from .report import write_report
from .scene import ScenarioConfig, build_dataset, load_manifest, sample_splits
from .scoring import (
    CubeErrors,
    ScoreWeights,
    TrainStats,
    batch_errors,
    calibrate,
    cube_scores,
    frame_pixel_map,
    pixel_score_patch,
)
from .storage import RunStorage
from .training import finetune_joint, train_cvae, train_memae

logger = logging.getLogger(__name__)

STAGES = (
    "gen",
    "flow",
    "train-flowae",
    "train-cvae",
    "finetune",
    "calibrate",
    "score",
    "eval",
    "report",
)

UPSTREAM = {stage: STAGES[:i] for i, stage in enumerate(STAGES)}

STAGE_SECTIONS = {
    "gen": ("seed", "data"),
    "flow": ("seed", "data", "flow"),
    "train-flowae": ("seed", "precision", "data", "flow", "cubes", "memae"),
    "train-cvae": ("seed", "precision", "data", "flow", "cubes", "memae", "cvae"),
    "finetune": MODEL_SECTIONS,
    "calibrate": MODEL_SECTIONS + ("eval.calibration_stride",),
    "score": MODEL_SECTIONS + ("eval.calibration_stride",),
    "eval": MODEL_SECTIONS + ("eval.calibration_stride",),
    "report": MODEL_SECTIONS + ("eval.calibration_stride",),
}

CHECKPOINT_FILES = {
    "stage2": ("models/memae_stage1.vadt", "models/cvae_stage2.vadt"),
    "final": ("models/memae_final.vadt", "models/cvae_final.vadt"),
}

ALL_SUBSET = "all"


@dataclass
class Scenario:
    """One generated clip with its flows and ground truth loaded."""

    config: ScenarioConfig
    split: str
    frames: np.ndarray
    flows: np.ndarray
    masks: np.ndarray
    boxes: list[list[BBox]]
    labels: np.ndarray

    @property
    def scenario_id(self) -> str:
        return self.config.scenario_id

    @property
    def subset(self) -> str:
        return f"{self.config.environment}-{self.config.weather.name}"


def detector_key(stub: DetectorStub) -> str:
    canonical = json.dumps(to_jsonable_python(stub), sort_keys=True, separators=(",", ":"))
    return "detected-" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def adhoc_condition(
    boxes: str, weights: ScoreWeights, flow_only: bool = False
) -> ConditionConfig:
    """Condition built from command line flags, named after its settings."""
    if flow_only:
        weights = weights.flow_only()
    name = f"{boxes}-w{weights.label.replace('/', '_')}"
    return validate_config(ConditionConfig, {"name": name, "boxes": boxes, "weights": weights})


class Pipeline:
    """Runs stages against one run directory.

    Args:
        storage: Run directory
        config: Resolved configuration
        conditions: Conditions to score; defaults to the active conditions
            of ``config``
    """

    def __init__(
        self,
        storage: RunStorage,
        config: RunConfig,
        conditions: Optional[Sequence[ConditionConfig]] = None,
    ):
        self.storage = storage
        self.config = config
        self.conditions = tuple(conditions) if conditions else config.active_conditions()
        self.data = storage.child("data")
        self._manifest: Optional[dict[str, list[ScenarioConfig]]] = None

    # ------------------------------------------------------------------ manifests

    def stage_hash(self, stage: str) -> str:
        return self.config.section_hash(STAGE_SECTIONS[stage])

    def check_upstream(self, stage: str) -> None:
        """Verify every upstream stage ran under the current configuration.

        Raises:
            MissingPrerequisiteError: If an upstream stage never completed
            VadConfigError: If it completed under a different configuration
        """
        for upstream in UPSTREAM[stage]:
            path = f"manifests/{upstream}.json"
            self.storage.require(path, upstream)
            recorded = self.storage.read_json(path).get("config_hash")
            expected = self.stage_hash(upstream)
            if recorded != expected:
                raise VadConfigError(
                    f"Artifacts of stage '{upstream}' were produced under a different "
                    f"configuration ({str(recorded)[:12]} != {expected[:12]}); rerun '{upstream}'"
                )

    def write_manifest(self, stage: str, outputs: Iterable[str], **extra: Any) -> None:
        inputs = {
            f"manifests/{u}.json": self.storage.sha256(f"manifests/{u}.json")
            for u in UPSTREAM[stage]
        }
        self.storage.write_json(
            f"manifests/{stage}.json",
            {
                "stage": stage,
                "config_hash": self.stage_hash(stage),
                "seed": self.config.seed,
                "inputs": inputs,
                "outputs": sorted(outputs),
                **extra,
            },
        )

    def save_config(self) -> None:
        self.storage.write_text("config.yaml", self.config.to_yaml())

    # ------------------------------------------------------------------ data access

    @property
    def manifest(self) -> dict[str, list[ScenarioConfig]]:
        if self._manifest is None:
            self._manifest = load_manifest(self.data)
        return self._manifest

    def scenarios(self, split: str) -> list[ScenarioConfig]:
        return self.manifest.get(split, [])

    def load_scenario(self, split: str, cfg: ScenarioConfig) -> Scenario:
        base = f"{split}/{cfg.scenario_id}"
        flow_path = f"flows/{split}/{cfg.scenario_id}.vadt"
        self.storage.require(flow_path, "flow")
        truth = self.data.read_json(f"{base}/gt.json")
        return Scenario(
            config=cfg,
            split=split,
            frames=load_tensors(self.data, f"{base}/frames.vadt")["frames"],
            flows=load_tensors(self.storage, flow_path)["flows"],
            masks=load_tensors(self.data, f"{base}/masks.vadt")["masks"] > 0.5,
            boxes=boxes_from_json(truth["boxes"]),
            labels=np.array(truth["anomaly"], dtype=bool),
        )

    def _cubes(self, scenario: Scenario, tracks: Sequence[Sequence[BBox]], stride: int) -> list:
        cubes_cfg = self.config.cubes
        return list(
            iter_cubes(
                scenario.frames,
                scenario.flows,
                tracks,
                cubes_cfg.t_len,
                cubes_cfg.size,
                cubes_cfg.margin,
                cubes_cfg.min_side,
                stride,
            )
        )

    def training_cubes(self, stride: int) -> CubeBatch:
        """Cubes of every training scenario, ground-truth tracks."""
        cubes = []
        for cfg in self.scenarios("train"):
            scenario = self.load_scenario("train", cfg)
            cubes.extend(self._cubes(scenario, scenario.boxes, stride))
        if not cubes:
            raise MissingPrerequisiteError("No training cubes could be built from the train split")
        logger.info("Built %d training cubes (stride %d)", len(cubes), stride)
        return stack_cubes(cubes)

    def load_models(self, checkpoint: str) -> tuple[MemAE, CVAE]:
        memae_path, cvae_path = CHECKPOINT_FILES[checkpoint]
        cubes_cfg = self.config.cubes
        memae = MemAE.from_config(
            self.config.memae, in_channels=(cubes_cfg.t_len - 1) * 2, seed=self.config.seed
        )
        producer = "finetune" if checkpoint == "final" else "train-flowae"
        meta = load_module(self.storage, memae_path, memae, producer)
        self._check_model_meta(memae_path, meta)
        cvae = CVAE.from_config(
            self.config.cvae, t_len=cubes_cfg.t_len, size=cubes_cfg.size, seed=self.config.seed
        )
        producer = "finetune" if checkpoint == "final" else "train-cvae"
        meta = load_module(self.storage, cvae_path, cvae, producer)
        self._check_model_meta(cvae_path, meta)
        return memae, cvae

    def _check_model_meta(self, path: str, meta: dict[str, Any]) -> None:
        stage = meta.get("stage", "")
        if stage in STAGE_SECTIONS and meta.get("config_hash") != self.stage_hash(stage):
            raise VadConfigError(f"Checkpoint '{path}' was trained under a different configuration")

    # ------------------------------------------------------------------ stages

    def run(self, stage: str) -> None:
        if stage not in STAGES:
            raise VadConfigError(f"Unknown stage '{stage}'. Valid stages: {', '.join(STAGES)}")
        logger.info("Stage %s: start", stage)
        set_precision(self.config.precision)
        getattr(self, "stage_" + stage.replace("-", "_"))()
        logger.info("Stage %s: done", stage)

    def run_all(self) -> None:
        self.save_config()
        for stage in STAGES:
            self.run(stage)

    def stage_gen(self) -> None:
        self.save_config()
        splits = sample_splits(self.config.data, self.config.seed)
        build_dataset(self.data, splits, jobs=self.config.jobs)
        self._manifest = None
        self.write_manifest("gen", ["data/manifest.json"])

    def stage_flow(self) -> None:
        self.check_upstream("flow")
        params = self.config.flow
        outputs = []
        executor = ProcessPoolExecutor(max_workers=self.config.jobs) if self.config.jobs > 1 else None
        try:
            for split, configs in self.manifest.items():
                for cfg in configs:
                    base = f"{split}/{cfg.scenario_id}"
                    if params.use_ground_truth:
                        motion = load_tensors(self.data, f"{base}/gt_flows.vadt")["flows"]
                        flows = clamp_motion(motion, params.max_displacement)
                    else:
                        frames = load_tensors(self.data, f"{base}/frames.vadt")["frames"]
                        flows = estimate_sequence(frames, params, executor)
                    path = f"flows/{base}.vadt"
                    save_tensors(self.storage, path, {"flows": flows})
                    outputs.append(path)
                    logger.info("Flow %s: %d frame pairs", base, len(flows))
        finally:
            if executor is not None:
                executor.shutdown()
        self.write_manifest("flow", outputs, source="ground-truth" if params.use_ground_truth else "estimated")

    def stage_train_flowae(self) -> None:
        self.check_upstream("train-flowae")
        cubes = self.training_cubes(self.config.cubes.train_stride)
        memae, curve = train_memae(cubes, self.config.memae, self.config.seed)
        self._save_model("models/memae_stage1.vadt", memae, "train-flowae", curve.to_dict())
        self.storage.write_json("curves/train-flowae.json", curve.to_dict())
        self.write_manifest("train-flowae", ["models/memae_stage1.vadt", "curves/train-flowae.json"])

    def stage_train_cvae(self) -> None:
        self.check_upstream("train-cvae")
        cubes_cfg = self.config.cubes
        memae = MemAE.from_config(self.config.memae, (cubes_cfg.t_len - 1) * 2, self.config.seed)
        load_module(self.storage, "models/memae_stage1.vadt", memae, "train-flowae")
        cubes = self.training_cubes(cubes_cfg.train_stride)
        cvae, curve = train_cvae(cubes, memae, self.config.cvae, self.config.seed, cubes_cfg.t_len)
        self._save_model("models/cvae_stage2.vadt", cvae, "train-cvae", curve.to_dict())
        self.storage.write_json("curves/train-cvae.json", curve.to_dict())
        self.write_manifest("train-cvae", ["models/cvae_stage2.vadt", "curves/train-cvae.json"])

    def stage_finetune(self) -> None:
        self.check_upstream("finetune")
        outputs = ["models/memae_final.vadt", "models/cvae_final.vadt"]
        if not self.config.finetune.enabled:
            logger.warning("Finetuning disabled: final checkpoints are the stage-2 checkpoints")
            for src, dst in zip(CHECKPOINT_FILES["stage2"], outputs):
                self.storage.copy(src, dst)
                self.storage.copy(src + ".json", dst + ".json")
            self.write_manifest("finetune", outputs, finetuned=False)
            return
        memae, cvae = self.load_models("stage2")
        cubes = self.training_cubes(self.config.cubes.train_stride)
        memae, cvae, curve = finetune_joint(
            cubes,
            memae,
            cvae,
            self.config.finetune,
            self.config.memae,
            self.config.cvae,
            self.config.seed,
        )
        self._save_model(outputs[0], memae, "finetune", curve.to_dict())
        self._save_model(outputs[1], cvae, "finetune", curve.to_dict())
        self.storage.write_json("curves/finetune.json", curve.to_dict())
        self.write_manifest("finetune", outputs + ["curves/finetune.json"], finetuned=True)

    def _save_model(self, path: str, module: Any, stage: str, curve: dict[str, Any]) -> None:
        section = "memae" if isinstance(module, MemAE) else "cvae"
        save_module(
            self.storage,
            path,
            module,
            {
                "stage": stage,
                "config_hash": self.stage_hash(stage),
                "hyperparameters": getattr(self.config, section).model_dump(mode="json"),
                "loss_curve": curve["losses"],
            },
        )

    def checkpoints(self) -> list[str]:
        needed = {"final"} | {c.checkpoint for c in self.conditions}
        return sorted(needed)

    def stage_calibrate(self) -> None:
        self.check_upstream("calibrate")
        outputs = []
        stride = self.config.eval.calibration_stride
        for checkpoint in self.checkpoints():
            memae, cvae = self.load_models(checkpoint)
            parts = []
            for cfg in self.scenarios("train"):
                scenario = self.load_scenario("train", cfg)
                cubes = self._cubes(scenario, scenario.boxes, stride)
                if cubes:
                    errors = batch_errors(stack_cubes(cubes), memae, cvae)
                    parts.append(_compact(errors))
            if not parts:
                raise MissingPrerequisiteError("No calibration cubes in the train split")
            stats = calibrate(CubeErrors.concatenate(parts), model_hash=self.config.model_hash())
            path = f"calibration/{checkpoint}/stats.json"
            self.storage.write_json(path, stats.to_dict())
            outputs.append(path)
        self.write_manifest("calibrate", outputs)

    def load_stats(self, checkpoint: str) -> TrainStats:
        path = f"calibration/{checkpoint}/stats.json"
        self.storage.require(path, "calibrate")
        stats = TrainStats.from_dict(self.storage.read_json(path))
        if stats.model_hash != self.config.model_hash():
            raise VadConfigError(
                f"Calibration '{path}' was computed under a different model configuration; "
                "rerun 'calibrate'"
            )
        return stats

    def tracks_for(self, condition: ConditionConfig, scenario: Scenario) -> tuple[str, list[list[BBox]]]:
        if condition.boxes == "gt":
            return "gt", scenario.boxes
        stub = condition.detector or self.config.detector
        height, width = scenario.frames.shape[1:3]
        return detector_key(stub), detect_sequence(scenario.boxes, stub, height, width)

    def _scenario_errors(
        self,
        checkpoint: str,
        key: str,
        scenario: Scenario,
        tracks: Sequence[Sequence[BBox]],
        models: tuple[MemAE, CVAE],
    ) -> tuple[list[dict[str, Any]], Optional[CubeErrors]]:
        """Per-cube errors of one scenario, cached per checkpoint and box source."""
        base = f"errors/{checkpoint}/{key}/{scenario.scenario_id}"
        if self.storage.exists(base + ".json"):
            meta = self.storage.read_json(base + ".json")
            if meta["model_hash"] == self.config.model_hash():
                if not meta["cubes"]:
                    return [], None
                arrays = load_tensors(self.storage, base + ".vadt")
                return meta["cubes"], CubeErrors(arrays["s_r"], arrays["s_p"], arrays["e_r"], arrays["e_p"])
        cubes = self._cubes(scenario, tracks, 1)
        info = [
            {"frame": c.target_frame, "track_id": c.track_id, "box": c.box_at_t1.to_dict()}
            for c in cubes
        ]
        errors = _compact(batch_errors(stack_cubes(cubes), *models)) if cubes else None
        if errors is not None:
            save_tensors(
                self.storage,
                base + ".vadt",
                {"s_r": errors.s_r, "s_p": errors.s_p, "e_r": errors.e_r, "e_p": errors.e_p},
            )
        self.storage.write_json(base + ".json", {"model_hash": self.config.model_hash(), "cubes": info})
        return info, errors

    def stage_score(self) -> None:
        self.check_upstream("score")
        outputs = []
        models: dict[str, tuple[MemAE, CVAE]] = {}
        test = [self.load_scenario("test", cfg) for cfg in self.scenarios("test")]
        for condition in self.conditions:
            weights = condition.weights or self.config.weights
            stats = self.load_stats(condition.checkpoint)
            if condition.checkpoint not in models:
                models[condition.checkpoint] = self.load_models(condition.checkpoint)
            root = f"scores/{condition.name}"
            self.storage.write_json(
                f"{root}/condition.json",
                {
                    "condition": condition.model_dump(mode="json"),
                    "weights": to_jsonable_python(weights),
                    "model_hash": self.config.model_hash(),
                },
            )
            for scenario in test:
                key, tracks = self.tracks_for(condition, scenario)
                info, errors = self._scenario_errors(
                    condition.checkpoint, key, scenario, tracks, models[condition.checkpoint]
                )
                outputs.extend(
                    self._score_scenario(root, condition, weights, stats, scenario, tracks, info, errors)
                )
        self.write_manifest("score", outputs, conditions=[c.name for c in self.conditions])

    def _score_scenario(
        self,
        root: str,
        condition: ConditionConfig,
        weights: ScoreWeights,
        stats: TrainStats,
        scenario: Scenario,
        tracks: Sequence[Sequence[BBox]],
        info: list[dict[str, Any]],
        errors: Optional[CubeErrors],
    ) -> list[str]:
        num_frames, height, width = scenario.frames.shape[:3]
        per_frame: list[list[int]] = [[] for _ in range(num_frames)]
        for index, item in enumerate(info):
            per_frame[item["frame"]].append(index)
        scores = (
            cube_scores(errors.s_r, errors.s_p, stats, weights) if errors is not None else np.zeros(0)
        )
        frame_scores = np.zeros(num_frames)
        maps = np.zeros((num_frames, height, width), dtype=np.float32)
        for frame, indices in enumerate(per_frame):
            if not indices:
                continue
            frame_scores[frame] = float(np.max(scores[indices]))
            patches = [pixel_score_patch(errors.e_r[i], errors.e_p[i], stats, weights) for i in indices]
            boxes = [BBox.from_dict(info[i]["box"]) for i in indices]
            maps[frame] = frame_pixel_map(height, width, boxes, patches, frame_scores[frame]).scores
        t_len = self.config.cubes.t_len
        uncovered = [f for f in range(t_len, num_frames) if not per_frame[f]]
        if uncovered:
            missed = sum(bool(scenario.labels[f]) for f in uncovered)
            logger.warning(
                "%s/%s: %d frames without cubes (%d anomalous) score 0",
                condition.name,
                scenario.scenario_id,
                len(uncovered),
                missed,
            )
        base = f"{root}/{scenario.scenario_id}"
        self.storage.write_json(
            f"{base}/scores.json",
            {
                "condition": condition.name,
                "scenario_id": scenario.scenario_id,
                "environment": scenario.config.environment,
                "weather": scenario.config.weather.name,
                "model_hash": self.config.model_hash(),
                "weights": to_jsonable_python(weights),
                "frame_scores": [round(float(s), 8) for s in frame_scores],
                "labels": [bool(v) for v in scenario.labels],
                "cubes": [
                    {
                        "frame": item["frame"],
                        "track_id": item["track_id"],
                        "s_r": round(float(errors.s_r[i]), 10),
                        "s_p": round(float(errors.s_p[i]), 10),
                        "score": round(float(scores[i]), 8),
                    }
                    for i, item in enumerate(info)
                ]
                if errors is not None
                else [],
                "boxes": boxes_to_json(tracks),
            },
        )
        save_tensors(self.storage, f"{base}/maps.vadt", {"maps": maps})
        logger.info("Scored %s/%s", condition.name, scenario.scenario_id)
        return [f"{base}/scores.json", f"{base}/maps.vadt"]

    def dump_cubes(self, scenario_id: str, boxes: str = "gt") -> str:
        """Write every cube of one scenario to ``dumps/<scenario>/cubes.vadt``.

        Records: ``images``, ``flows``, ``targets`` as stacked for the
        networks, plus ``frames`` (target frame) and ``tracks`` per cube.
        """
        self.check_upstream("train-flowae")
        for split, configs in self.manifest.items():
            match = [cfg for cfg in configs if cfg.scenario_id == scenario_id]
            if match:
                scenario = self.load_scenario(split, match[0])
                break
        else:
            raise VadConfigError(f"Unknown scenario '{scenario_id}'")
        _, tracks = self.tracks_for(ConditionConfig(name="dump", boxes=boxes), scenario)
        cubes = self._cubes(scenario, tracks, 1)
        if not cubes:
            raise MissingPrerequisiteError(f"Scenario '{scenario_id}' has no cubes to dump")
        batch = stack_cubes(cubes)
        path = f"dumps/{scenario_id}/cubes.vadt"
        save_tensors(
            self.storage,
            path,
            {
                "images": batch.images,
                "flows": batch.flows,
                "targets": batch.targets,
                "frames": np.array([c.target_frame for c in cubes], dtype=np.float32),
                "tracks": np.array([c.track_id for c in cubes], dtype=np.float32),
            },
        )
        logger.info("Dumped %d cubes of %s to %s", len(cubes), scenario_id, path)
        return path

    # ------------------------------------------------------------------ evaluation

    def scored_conditions(self) -> list[str]:
        """Condition directories scored under the current model configuration."""
        if not self.storage.exists("scores"):
            raise MissingPrerequisiteError("Missing artifact 'scores' (run 'score' first)")
        present = []
        for name in self.storage.list_dir("scores"):
            path = f"scores/{name}/condition.json"
            if not self.storage.exists(path):
                continue
            if self.storage.read_json(path).get("model_hash") != self.config.model_hash():
                logger.warning("Skipping condition '%s': scored under another configuration", name)
                continue
            present.append(name)
        configured = [c.name for c in self.config.eval.conditions if c.name in present]
        return configured + sorted(set(present) - set(configured))

    def stage_eval(self) -> None:
        self.check_upstream("eval")
        target = self.config.eval.fpr_target
        rows: list[dict[str, Any]] = []
        per_scenario: dict[str, dict[str, Optional[float]]] = {}
        premise: dict[str, dict[str, Optional[float]]] = {}
        test = [self.load_scenario("test", cfg) for cfg in self.scenarios("test")]
        for name in self.scored_conditions():
            results = []
            for scenario in test:
                data = self.storage.read_json(f"scores/{name}/{scenario.scenario_id}/scores.json")
                maps = load_tensors(self.storage, f"scores/{name}/{scenario.scenario_id}/maps.vadt")["maps"]
                results.append((scenario, data, maps))
            subsets = [ALL_SUBSET] + sorted({s.subset for s in test})
            for subset in subsets:
                chosen = [r for r in results if subset == ALL_SUBSET or r[0].subset == subset]
                rows.append(_metric_row(name, subset, chosen, target))
            per_scenario[name] = {
                scenario.scenario_id: _maybe(auroc, data["frame_scores"], data["labels"])
                for scenario, data, _ in results
            }
            premise[name] = _premise(results)
            logger.info("Evaluated condition %s", name)
        if not rows:
            raise MissingPrerequisiteError("No scored conditions to evaluate (run 'score' first)")
        self.storage.write_json("eval/metrics.json", {"rows": rows, "per_scenario": per_scenario})
        self.storage.write_json("eval/premise.json", premise)
        self.write_manifest("eval", ["eval/metrics.json", "eval/premise.json"])

    def stage_report(self) -> None:
        self.check_upstream("report")
        outputs = write_report(self.storage, self.config, self.scored_conditions(), self.scenarios("test"))
        self.write_manifest("report", outputs)


def _compact(errors: CubeErrors) -> CubeErrors:
    return CubeErrors(
        errors.s_r.astype(np.float32),
        errors.s_p.astype(np.float32),
        errors.e_r.astype(np.float32),
        errors.e_p.astype(np.float32),
    )


def _maybe(metric: Any, *args: Any) -> Optional[float]:
    try:
        return round(float(metric(*args)), 8)
    except UndefinedMetricError:
        return None


def _metric_row(
    condition: str, subset: str, results: list[tuple[Scenario, dict[str, Any], np.ndarray]], target: float
) -> dict[str, Any]:
    scores = np.concatenate([np.asarray(d["frame_scores"]) for _, d, _ in results])
    labels = np.concatenate([np.asarray(d["labels"], dtype=bool) for _, d, _ in results])
    maps, masks, gt_boxes, pred_boxes = [], [], [], []
    for scenario, data, amap in results:
        maps.extend(amap)
        masks.extend(scenario.masks)
        gt_boxes.extend(scenario.boxes)
        pred_boxes.extend(boxes_from_json(data["boxes"]))
    return {
        "condition": condition,
        "subset": subset,
        "scenarios": len(results),
        "frames": int(labels.size),
        "anomalous_frames": int(labels.sum()),
        "auroc": _maybe(auroc, scores, labels),
        "frame_fpr95": _maybe(fpr_at_tpr, scores, labels, target),
        "pixel_fpr95": _maybe(pixel_fpr95_overlap, maps, masks, gt_boxes, pred_boxes, target),
        "box_iou": round(pooled_box_iou(gt_boxes, pred_boxes), 8),
    }


def _premise(results: list[tuple[Scenario, dict[str, Any], np.ndarray]]) -> dict[str, Optional[float]]:
    groups: dict[bool, dict[str, list[float]]] = {
        True: {"s_r": [], "s_p": []},
        False: {"s_r": [], "s_p": []},
    }
    for _, data, _ in results:
        labels = data["labels"]
        for cube in data["cubes"]:
            group = groups[bool(labels[cube["frame"]])]
            group["s_r"].append(cube["s_r"])
            group["s_p"].append(cube["s_p"])

    def mean(values: list[float]) -> Optional[float]:
        return round(float(np.mean(values)), 10) if values else None

    return {
        "anomalous_cubes": len(groups[True]["s_r"]),
        "normal_cubes": len(groups[False]["s_r"]),
        "anomalous_mean_s_r": mean(groups[True]["s_r"]),
        "normal_mean_s_r": mean(groups[False]["s_r"]),
        "anomalous_mean_s_p": mean(groups[True]["s_p"]),
        "normal_mean_s_p": mean(groups[False]["s_p"]),
    }


def with_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    precision: Optional[str] = None,
    no_finetune: bool = False,
) -> RunConfig:
    """Apply the dedicated command line flags to a resolved configuration."""
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if jobs is not None:
        changes["jobs"] = jobs
    if precision is not None:
        changes["precision"] = precision
    if no_finetune:
        changes["finetune"] = config.finetune.updated(enabled=False)
    return config.updated(**changes) if changes else config
