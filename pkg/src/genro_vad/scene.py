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

"""Synthetic ego-view driving scenes.

A scenario is a straight multi-lane road seen by a pinhole camera mounted on
the ego vehicle. A lead vehicle drives ahead in the ego lane, background
agents drive in the side lanes at constant relative speed. Distances
("gaps") and speeds are expressed in world units and world units per frame;
an object at gap ``Z`` is drawn ``focal / Z`` times its world size, so a
closing gap makes the lead sprite grow.

The lead follows the scenario's cruise profile, ramping at a comfortable
rate. A braking event makes it shed ``deceleration`` units of speed per
frame until it stops, wait ``stop_duration`` frames and resume. The ego
reacts to the lead's speed with a delay of ``reaction_frames`` and brakes at
most ``ego_brake_decel`` per frame, so braking events close the gap and
ordinary speed changes barely do.

Ground truth per frame: boxes with stable track ids (the lead is track 0),
the visible silhouette of the lead while it is braking (from onset to the
frame it reaches a standstill), per-frame kinematics, and the exact motion
field between consecutive frames.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ConfigDict, TypeAdapter, ValidationError

from .autodiff.container import save_tensors
from .boxes import BBox, boxes_to_json, clip_box
from .config import ENVIRONMENTS, DataConfig, config_error
from .exceptions import CollisionError, VadConfigError
from .storage import RunStorage

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LEAD_TRACK = 0

FOCAL_RATIO = 0.5
HORIZON_RATIO = 0.4
CAMERA_HEIGHT = 12.0
MIN_DEPTH = 4.0
ROAD_HALF_WIDTH = 21.0
LANE_MARKS = (-7.0, 7.0)
TEXTURE_CELL = 1.5
TEXTURE_SIZE = 64
STOP_EPS = 1e-9

PALETTE = (
    (0.80, 0.12, 0.10),
    (0.15, 0.30, 0.75),
    (0.90, 0.75, 0.15),
    (0.20, 0.60, 0.25),
    (0.85, 0.85, 0.85),
    (0.55, 0.20, 0.60),
)


@dataclass(frozen=True)
class BrakingEvent:
    """Sudden braking of the lead vehicle."""

    onset_frame: int
    deceleration: float
    stop_duration: int = 20

    def __post_init__(self) -> None:
        if self.onset_frame < 1:
            raise VadConfigError("braking onset_frame must be >= 1")
        if self.deceleration <= 0:
            raise VadConfigError("braking deceleration must be positive")
        if self.stop_duration < 0:
            raise VadConfigError("braking stop_duration must be >= 0")


@dataclass(frozen=True)
class LeadVehicle:
    width: float = 14.0
    height: float = 11.0
    color: Tuple[float, float, float] = PALETTE[0]
    initial_gap: float = 30.0


@dataclass(frozen=True)
class AgentSpec:
    """Background vehicle in a side lane."""

    lane: float
    initial_gap: float
    relative_speed: float = 0.0
    width: float = 14.0
    height: float = 11.0
    color: Tuple[float, float, float] = PALETTE[1]


@dataclass(frozen=True)
class Weather:
    noise_sigma: float = 0.0
    rain_density: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise VadConfigError(f"weather noise_sigma must lie in [0, 0.2], got {self.noise_sigma}")
        if not 0.0 <= self.rain_density <= 1.0:
            raise VadConfigError(f"weather rain_density must lie in [0, 1], got {self.rain_density}")

    @property
    def name(self) -> str:
        return "rain" if self.noise_sigma > 0 or self.rain_density > 0 else "clear"


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to render one clip deterministically.

    ``ego_speed`` is the piecewise-constant cruise profile of the traffic as
    ``(start_frame, speed)`` pairs; the first pair must start at frame 0.
    """

    __pydantic_config__ = ConfigDict(extra="forbid")

    scenario_id: str
    seed: int
    frame_size: Tuple[int, int] = (64, 64)
    num_frames: int = 150
    ego_speed: Tuple[Tuple[int, float], ...] = ((0, 2.0),)
    lead: LeadVehicle = field(default_factory=LeadVehicle)
    agents: Tuple[AgentSpec, ...] = ()
    braking_events: Tuple[BrakingEvent, ...] = ()
    weather: Weather = field(default_factory=Weather)
    environment: str = "city"
    reaction_frames: int = 5
    ego_brake_decel: float = 0.4
    comfort_accel: float = 0.02

    def __post_init__(self) -> None:
        if self.num_frames < 2:
            raise VadConfigError("num_frames must be >= 2")
        if min(self.frame_size) < 8:
            raise VadConfigError("frame_size must be at least 8x8")
        if not self.ego_speed or self.ego_speed[0][0] != 0:
            raise VadConfigError("ego_speed profile must start at frame 0")
        if any(speed < 0 for _, speed in self.ego_speed):
            raise VadConfigError("ego_speed values must be >= 0")
        if self.environment not in ENVIRONMENTS:
            raise VadConfigError(f"environment must be one of {ENVIRONMENTS}")
        if self.lead.initial_gap <= 0:
            raise VadConfigError("lead initial_gap must be positive")
        top_speed = max(speed for _, speed in self.ego_speed)
        for event in self.braking_events:
            duration = math.ceil(top_speed / event.deceleration - STOP_EPS)
            if event.onset_frame + duration > self.num_frames:
                raise VadConfigError(
                    f"{self.scenario_id}: braking at frame {event.onset_frame} needs "
                    f"{duration} frames, clip has {self.num_frames}"
                )

    @property
    def height(self) -> int:
        return self.frame_size[0]

    @property
    def width(self) -> int:
        return self.frame_size[1]

    def to_dict(self) -> dict[str, Any]:
        return SCENARIO_ADAPTER.dump_python(self, mode="json")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScenarioConfig:
        try:
            return SCENARIO_ADAPTER.validate_python(data)
        except ValidationError as e:
            raise config_error(e) from e


SCENARIO_ADAPTER = TypeAdapter(ScenarioConfig)


@dataclass
class Kinematics:
    """Per-frame speeds and gaps; ``gap[t+1] = gap[t] - (ego[t] - lead[t])``."""

    lead_speed: np.ndarray
    ego_speed: np.ndarray
    gap: np.ndarray
    odometer: np.ndarray
    lead_decel: np.ndarray
    braking: np.ndarray


@dataclass
class FrameSequence:
    """Rendered clip: frames (T, H, W, 3) in [0, 1] and motion (T-1, 2, H, W)."""

    frames: np.ndarray
    motion: np.ndarray


@dataclass
class GroundTruth:
    boxes: list[list[BBox]]
    masks: np.ndarray
    flags: np.ndarray
    kinematics: Kinematics

    @property
    def anomalous_frames(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.flags)]

    def to_json(self, cfg: ScenarioConfig) -> dict[str, Any]:
        kin = self.kinematics
        return {
            "scenario_id": cfg.scenario_id,
            "environment": cfg.environment,
            "weather": cfg.weather.name,
            "num_frames": cfg.num_frames,
            "frame_size": list(cfg.frame_size),
            "boxes": boxes_to_json(self.boxes),
            "anomaly": [bool(f) for f in self.flags],
            "lead_speed": [round(float(v), 6) for v in kin.lead_speed],
            "lead_decel": [round(float(v), 6) for v in kin.lead_decel],
            "ego_speed": [round(float(v), 6) for v in kin.ego_speed],
            "lead_gap": [round(float(v), 6) for v in kin.gap],
        }


# ---------------------------------------------------------------------- kinematics


def _cruise_profile(cfg: ScenarioConfig) -> np.ndarray:
    cruise = np.empty(cfg.num_frames)
    points = sorted(cfg.ego_speed)
    for i, (start, speed) in enumerate(points):
        stop = points[i + 1][0] if i + 1 < len(points) else cfg.num_frames
        cruise[start:stop] = speed
    return cruise


def _ramp(current: float, target: float, up: float, down: float) -> float:
    return current + float(np.clip(target - current, -down, up))


def simulate_kinematics(cfg: ScenarioConfig) -> Kinematics:
    """Integrate lead/ego speeds and the lead gap for every frame.

    Raises:
        CollisionError: If the gap reaches zero
        VadConfigError: If braking events overlap or never reach a stop
    """
    n = cfg.num_frames
    cruise = _cruise_profile(cfg)
    events = sorted(cfg.braking_events, key=lambda e: e.onset_frame)
    lead = np.zeros(n)
    braking = np.zeros(n, dtype=bool)

    phase = "cruise"
    event: Optional[BrakingEvent] = None
    pending = list(events)
    hold = 0
    for t in range(n):
        prev = lead[t - 1] if t else cruise[0]
        if pending and pending[0].onset_frame == t:
            if phase != "cruise":
                raise VadConfigError(
                    f"{cfg.scenario_id}: braking event at frame {t} overlaps the previous one"
                )
            event = pending.pop(0)
            phase = "braking"
        if phase == "braking":
            assert event is not None
            v = prev - event.deceleration
            braking[t] = True
            if v <= STOP_EPS:
                v = 0.0
                hold = event.stop_duration
                phase = "stopped" if hold > 0 else "cruise"
        elif phase == "stopped":
            v = 0.0
            hold -= 1
            if hold <= 0:
                phase = "cruise"
        else:
            v = _ramp(prev, cruise[t], cfg.comfort_accel, cfg.comfort_accel)
        lead[t] = v
    if phase == "braking":
        raise VadConfigError(f"{cfg.scenario_id}: braking does not reach a stop within the clip")

    ego = np.zeros(n)
    ego[0] = cruise[0]
    for t in range(1, n):
        reference = lead[max(t - cfg.reaction_frames, 0)]
        ego[t] = _ramp(ego[t - 1], reference, cfg.comfort_accel, cfg.ego_brake_decel)

    gap = np.zeros(n)
    odometer = np.zeros(n)
    gap[0] = cfg.lead.initial_gap
    for t in range(n - 1):
        gap[t + 1] = gap[t] - (ego[t] - lead[t])
        odometer[t + 1] = odometer[t] + ego[t]
        if gap[t + 1] <= 0:
            raise CollisionError(
                f"{cfg.scenario_id}: lead gap reached {gap[t + 1]:.3f} at frame {t + 1}"
            )

    decel = np.zeros(n)
    decel[1:] = lead[:-1] - lead[1:]
    return Kinematics(lead, ego, gap, odometer, decel, braking)


# ---------------------------------------------------------------------- rendering


@dataclass
class _Sprite:
    track_id: int
    lateral: float
    gap: float
    next_gap: float
    width: float
    height: float
    color: np.ndarray


class _Camera:
    """Pinhole camera looking down a flat road."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.focal = FOCAL_RATIO * width
        self.horizon = HORIZON_RATIO * height
        self.cx = width / 2.0
        self.ys = np.arange(height) + 0.5
        self.xs = np.arange(width) + 0.5
        dy = self.ys - self.horizon
        self.ground_rows = dy > 0
        self.row_depth = np.full(height, np.inf)
        self.row_depth[self.ground_rows] = CAMERA_HEIGHT * self.focal / dy[self.ground_rows]
        depth = self.row_depth[self.ground_rows][:, None]
        self.lateral = (self.xs[None, :] - self.cx) * depth / self.focal

    def project(self, lateral: float, gap: float, width: float, height: float) -> tuple:
        scale = self.focal / gap
        bottom = self.horizon + CAMERA_HEIGHT * scale
        centre = self.cx + lateral * scale
        half = width * scale / 2.0
        return centre - half, bottom - height * scale, centre + half, bottom


def _background(cfg: ScenarioConfig, camera: _Camera) -> np.ndarray:
    """Static sky and skyline above the horizon."""
    rng = np.random.default_rng([cfg.seed, 1])
    h, w = cfg.height, cfg.width
    image = np.zeros((h, w, 3))
    fade = np.clip(camera.ys / max(camera.horizon, 1.0), 0.0, 1.0)[:, None, None]
    if cfg.environment == "city":
        sky_top, sky_low = np.array([0.45, 0.55, 0.72]), np.array([0.70, 0.75, 0.82])
    else:
        sky_top, sky_low = np.array([0.30, 0.50, 0.85]), np.array([0.65, 0.78, 0.92])
    image[:] = sky_top * (1 - fade) + sky_low * fade

    horizon_row = int(np.ceil(camera.horizon - 0.5))
    if cfg.environment == "city":
        x = 0
        while x < w:
            bw = int(rng.integers(3, 9))
            bh = int(rng.integers(3, max(horizon_row - 1, 4)))
            shade = rng.uniform(0.25, 0.6)
            top = max(horizon_row - bh, 0)
            image[top:horizon_row, x : x + bw] = shade
            image[top + 1 : horizon_row : 3, x + 1 : x + bw - 1 : 2] = shade + 0.25
            x += bw
    else:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        cols = np.arange(w)
        ridge = 2.5 + 1.5 * np.sin(cols / w * 2 * np.pi + phase[0]) + np.sin(cols / w * 5 * np.pi + phase[1])
        for j in cols:
            top = max(horizon_row - int(round(ridge[j] + 1)), 0)
            image[top:horizon_row, j] = (0.22, 0.38, 0.24)
        image[:horizon_row] += rng.normal(0, 0.015, size=(horizon_row, w, 1)) * (image[:horizon_row] < 0.5)
    return np.clip(image, 0.0, 1.0)


def _ground(
    cfg: ScenarioConfig, camera: _Camera, texture: np.ndarray, odometer: float
) -> np.ndarray:
    """Road surface, lane marks and verge below the horizon for one frame."""
    depth = camera.row_depth[camera.ground_rows][:, None]
    lateral = camera.lateral
    along = depth + odometer
    i = np.floor((lateral + 64.0) / TEXTURE_CELL).astype(np.int64) % TEXTURE_SIZE
    k = np.floor(along / TEXTURE_CELL).astype(np.int64) % TEXTURE_SIZE
    tex = texture[i, k][..., None]
    on_road = (np.abs(lateral) <= ROAD_HALF_WIDTH)[..., None]
    if cfg.environment == "city":
        verge = np.array([0.58, 0.56, 0.52])
    else:
        verge = np.array([0.28, 0.46, 0.22])
    road = np.array([0.36, 0.36, 0.38])
    colors = np.where(on_road, road, verge) + 0.08 * tex
    dashed = np.broadcast_to(np.mod(along, 6.0) < 3.0, lateral.shape)
    for mark in LANE_MARKS:
        colors[(np.abs(lateral - mark) < 0.5) & dashed] = 0.9
    colors[np.abs(np.abs(lateral) - ROAD_HALF_WIDTH) < 0.5] = 0.85
    return colors


def _draw_sprite(
    image: np.ndarray, ids: np.ndarray, camera: _Camera, sprite: _Sprite
) -> Optional[BBox]:
    x0, y0, x1, y1 = camera.project(sprite.lateral, sprite.gap, sprite.width, sprite.height)
    box = clip_box(x0, y0, x1, y1, camera.height, camera.width, track_id=sprite.track_id)
    if box is None:
        return None
    ys = camera.ys[box.y_min : box.y_max][:, None]
    xs = camera.xs[box.x_min : box.x_max][None, :]
    u = (xs - x0) / (x1 - x0)
    v = (ys - y0) / (y1 - y0)
    patch = np.empty((box.height, box.width, 3))
    patch[:] = sprite.color
    window = (v > 0.18) & (v < 0.45) & (u > 0.15) & (u < 0.85)
    patch[window] = (0.16, 0.20, 0.28)
    lights = (v > 0.6) & (v < 0.75) & ((u < 0.2) | (u > 0.8))
    patch[lights] = (0.95, 0.85, 0.30)
    border = (xs - x0 < 1.0) | (x1 - xs <= 1.0) | (ys - y0 < 1.0) | (y1 - ys <= 1.0)
    patch[np.broadcast_to(border, window.shape)] = 0.08
    image[box.y_min : box.y_max, box.x_min : box.x_max] = patch
    ids[box.y_min : box.y_max, box.x_min : box.x_max] = sprite.track_id
    return box


def _weather(cfg: ScenarioConfig, image: np.ndarray, frame: int) -> np.ndarray:
    weather = cfg.weather
    if weather.name == "clear":
        return image
    rng = np.random.default_rng([cfg.seed, 3, frame])
    out = image + rng.normal(0.0, weather.noise_sigma, size=image.shape) if weather.noise_sigma else image.copy()
    count = int(round(weather.rain_density * cfg.width))
    for _ in range(count):
        x = int(rng.integers(0, cfg.width))
        y = int(rng.integers(0, cfg.height))
        length = int(rng.integers(3, 8))
        out[y : y + length, x] = 0.65 * out[y : y + length, x] + 0.35 * 0.85
    return out


def _sprites(cfg: ScenarioConfig, kin: Kinematics, t: int) -> list[_Sprite]:
    nxt = min(t + 1, cfg.num_frames - 1)
    lead = cfg.lead
    sprites = [
        _Sprite(
            LEAD_TRACK, 0.0, kin.gap[t], kin.gap[nxt], lead.width, lead.height, np.array(lead.color)
        )
    ]
    for k, agent in enumerate(cfg.agents, start=1):
        gap = agent.initial_gap + agent.relative_speed * t
        next_gap = agent.initial_gap + agent.relative_speed * (t + 1)
        if gap <= MIN_DEPTH:
            continue
        sprites.append(
            _Sprite(k, agent.lane, gap, next_gap, agent.width, agent.height, np.array(agent.color))
        )
    sprites.sort(key=lambda s: -s.gap)
    return sprites


def _motion(camera: _Camera, ids: np.ndarray, sprites: list[_Sprite], advance: float) -> np.ndarray:
    """Exact displacement field from frame t to t+1.

    Every visible point lies on a fronto-parallel plane (road rows or a
    sprite), so its offset from the principal point scales by Z_t / Z_t+1.
    """
    factor = np.zeros((camera.height, camera.width))
    rows = camera.ground_rows
    depth = camera.row_depth[rows]
    factor[rows] = (depth / np.maximum(depth - advance, 1.0) - 1.0)[:, None]
    for sprite in sprites:
        covered = ids == sprite.track_id
        factor[covered] = sprite.gap / max(sprite.next_gap, 1.0) - 1.0
    motion = np.empty((2, camera.height, camera.width))
    motion[0] = (camera.xs[None, :] - camera.cx) * factor
    motion[1] = (camera.ys[:, None] - camera.horizon) * factor
    return motion


def generate_scenario(cfg: ScenarioConfig) -> tuple[FrameSequence, GroundTruth]:
    """Render a scenario and its ground truth.

    Deterministic for a fixed configuration (bit-identical frames).

    Raises:
        CollisionError: If the lead gap reaches zero
        VadConfigError: If the configuration is inconsistent
    """
    kin = simulate_kinematics(cfg)
    camera = _Camera(cfg.height, cfg.width)
    background = _background(cfg, camera)
    texture = np.random.default_rng([cfg.seed, 2]).uniform(-1.0, 1.0, (TEXTURE_SIZE, TEXTURE_SIZE))

    n, h, w = cfg.num_frames, cfg.height, cfg.width
    frames = np.empty((n, h, w, 3), dtype=np.float32)
    motion = np.empty((n - 1, 2, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=bool)
    all_boxes: list[list[BBox]] = []

    for t in range(n):
        image = background.copy()
        image[camera.ground_rows] = _ground(cfg, camera, texture, kin.odometer[t])
        ids = np.full((h, w), -1, dtype=np.int64)
        sprites = _sprites(cfg, kin, t)
        boxes = []
        for sprite in sprites:
            box = _draw_sprite(image, ids, camera, sprite)
            if box is not None:
                boxes.append(box)
        boxes.sort(key=lambda b: b.track_id)
        all_boxes.append(boxes)
        if kin.braking[t]:
            masks[t] = ids == LEAD_TRACK
        if t < n - 1:
            motion[t] = _motion(camera, ids, sprites, kin.ego_speed[t])
        frames[t] = np.clip(_weather(cfg, image, t), 0.0, 1.0)

    flags = masks.reshape(n, -1).any(axis=1)
    logger.debug("Rendered %s: %d frames, %d anomalous", cfg.scenario_id, n, int(flags.sum()))
    return FrameSequence(frames, motion), GroundTruth(all_boxes, masks, flags, kin)


# ---------------------------------------------------------------------- datasets


def sample_splits(data: DataConfig, seed: int) -> dict[str, list[ScenarioConfig]]:
    """Draw the train (normal only) and test (with braking) scenario configs."""
    return {
        "train": [_sample_scenario(data, seed, "train", i) for i in range(data.train_scenarios)],
        "test": [_sample_scenario(data, seed, "test", i) for i in range(data.test_scenarios)],
    }


def _sample_scenario(data: DataConfig, seed: int, split: str, index: int) -> ScenarioConfig:
    rng = np.random.default_rng([seed, 0 if split == "train" else 1, index])
    environment = data.environments[index % len(data.environments)]
    weather_name = data.weathers[(index // len(data.environments)) % len(data.weathers)]
    weather = (
        Weather(data.rain_noise, data.rain_density) if weather_name == "rain" else Weather()
    )
    cruise = float(rng.uniform(*data.cruise_speed))
    profile = [(0, round(cruise, 4))]
    if split == "train" and 0 < data.speed_changes <= data.num_frames - 20:
        starts = sorted(rng.choice(np.arange(10, data.num_frames - 10), data.speed_changes, replace=False))
        for start in starts:
            profile.append((int(start), round(float(rng.uniform(*data.cruise_speed)), 4)))

    palette = rng.permutation(len(PALETTE))
    lead = LeadVehicle(
        width=data.lead_size[0],
        height=data.lead_size[1],
        color=PALETTE[int(palette[0])],
        initial_gap=round(float(rng.uniform(*data.initial_gap)), 4),
    )
    agents = []
    for k in range(data.agent_count):
        agents.append(
            AgentSpec(
                lane=float(data.lanes[int(rng.integers(len(data.lanes)))]),
                initial_gap=round(float(rng.uniform(*data.agent_gap)), 4),
                relative_speed=round(
                    float(rng.uniform(-data.agent_relative_speed, data.agent_relative_speed)), 4
                ),
                width=data.lead_size[0],
                height=data.lead_size[1],
                color=PALETTE[int(palette[(k + 1) % len(PALETTE)])],
            )
        )

    events: tuple[BrakingEvent, ...] = ()
    if split == "test":
        decel = round(float(rng.uniform(*data.braking_decel)), 4)
        latest = min(data.braking_onset[1], data.num_frames - math.ceil(cruise / decel) - 1)
        onset = int(rng.integers(data.braking_onset[0], latest + 1))
        events = (BrakingEvent(onset, decel, data.stop_duration),)

    return ScenarioConfig(
        scenario_id=f"{split}_{index:03d}",
        seed=int(rng.integers(0, 2**31 - 1)),
        frame_size=(data.frame_height, data.frame_width),
        num_frames=data.num_frames,
        ego_speed=tuple(profile),
        lead=lead,
        agents=tuple(agents),
        braking_events=events,
        weather=weather,
        environment=environment,
        reaction_frames=data.reaction_frames,
        ego_brake_decel=data.ego_brake_decel,
        comfort_accel=data.comfort_accel,
    )


def _validate_splits(splits: Mapping[str, Sequence[ScenarioConfig]]) -> None:
    seen: dict[str, str] = {}
    for split, configs in splits.items():
        if not split or "/" in split:
            raise VadConfigError(f"Invalid split name '{split}'")
        for cfg in configs:
            if cfg.scenario_id in seen:
                raise VadConfigError(
                    f"Scenario id '{cfg.scenario_id}' appears in splits "
                    f"'{seen[cfg.scenario_id]}' and '{split}'"
                )
            seen[cfg.scenario_id] = split
            if split == "train" and cfg.braking_events:
                raise VadConfigError(f"Train scenario '{cfg.scenario_id}' has braking events")
            if split == "test" and not cfg.braking_events:
                raise VadConfigError(f"Test scenario '{cfg.scenario_id}' has no braking event")


def build_dataset(
    storage: RunStorage,
    splits: Mapping[str, Sequence[ScenarioConfig]],
    jobs: int = 1,
) -> dict[str, Any]:
    """Render every scenario of every split and write the dataset manifest.

    Layout: ``<split>/<scenario_id>/{frames.vadt, masks.vadt, gt_flows.vadt,
    gt.json}`` plus ``manifest.json`` holding every scenario config, so the
    dataset can be regenerated byte for byte.

    Args:
        storage: Dataset root
        splits: Split name to scenario configs (``train`` must be normal only,
            ``test`` must contain braking)
        jobs: Worker processes used for rendering
    """
    _validate_splits(splits)
    manifest = {
        "format_version": FORMAT_VERSION,
        "splits": {split: [cfg.to_dict() for cfg in configs] for split, configs in splits.items()},
    }
    work = [(split, cfg) for split, configs in splits.items() for cfg in configs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rendered = pool.map(generate_scenario, [cfg for _, cfg in work])
            for (split, cfg), (sequence, truth) in zip(work, rendered):
                _store(storage, split, cfg, sequence, truth)
    else:
        for split, cfg in work:
            _store(storage, split, cfg, *generate_scenario(cfg))
    storage.write_json("manifest.json", manifest)
    return manifest


def _store(
    storage: RunStorage, split: str, cfg: ScenarioConfig, sequence: FrameSequence, truth: GroundTruth
) -> None:
    base = f"{split}/{cfg.scenario_id}"
    save_tensors(storage, f"{base}/frames.vadt", {"frames": sequence.frames})
    save_tensors(storage, f"{base}/masks.vadt", {"masks": truth.masks.astype(np.float32)})
    save_tensors(storage, f"{base}/gt_flows.vadt", {"flows": sequence.motion})
    storage.write_json(f"{base}/gt.json", truth.to_json(cfg))
    logger.info(
        "Generated %s/%s (%s, %s): %d anomalous frames",
        split,
        cfg.scenario_id,
        cfg.environment,
        cfg.weather.name,
        int(truth.flags.sum()),
    )


def load_manifest(storage: RunStorage) -> dict[str, list[ScenarioConfig]]:
    """Read the scenario configs recorded by :func:`build_dataset`."""
    storage.require("manifest.json", "gen")
    manifest = storage.read_json("manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VadConfigError(f"Unsupported dataset format_version {manifest.get('format_version')}")
    return {
        split: [ScenarioConfig.from_dict(item) for item in items]
        for split, items in manifest["splits"].items()
    }


def rebuild_dataset(storage: RunStorage, jobs: int = 1) -> dict[str, Any]:
    """Regenerate a dataset from its manifest."""
    return build_dataset(storage, load_manifest(storage), jobs=jobs)
