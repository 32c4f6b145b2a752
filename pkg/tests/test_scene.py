"""Tests for the synthetic driving scenes and dataset layout."""

import numpy as np
import pytest

from genro_vad.autodiff.container import load_tensors
from genro_vad.boxes import union_mask
from genro_vad.exceptions import CollisionError, MissingPrerequisiteError, VadConfigError
from genro_vad.scene import (
    LEAD_TRACK,
    AgentSpec,
    BrakingEvent,
    LeadVehicle,
    ScenarioConfig,
    Weather,
    build_dataset,
    generate_scenario,
    load_manifest,
    rebuild_dataset,
    sample_splits,
    simulate_kinematics,
)


def braking_scenario(**kwargs):
    """A 32x32 clip whose lead brakes at frame 5 and stops at frame 9."""
    params = dict(
        scenario_id="test_900",
        seed=5,
        frame_size=(32, 32),
        num_frames=30,
        ego_speed=((0, 2.0),),
        braking_events=(BrakingEvent(5, 0.4, 3),),
    )
    params.update(kwargs)
    return ScenarioConfig(**params)


@pytest.mark.unit
class TestKinematics:
    """Speed and gap integration."""

    def test_gap_recurrence(self):
        """Test the gap shrinks by the speed difference every frame."""
        kin = simulate_kinematics(braking_scenario())
        np.testing.assert_allclose(np.diff(kin.gap), kin.lead_speed[:-1] - kin.ego_speed[:-1])

    def test_braking_window(self):
        """Test braking lasts from onset until the lead stands still."""
        kin = simulate_kinematics(braking_scenario())
        assert list(np.flatnonzero(kin.braking)) == [5, 6, 7, 8, 9]
        assert kin.lead_speed[9] == 0.0
        assert kin.lead_decel[6] == pytest.approx(0.4)

    def test_ego_reacts_with_delay(self):
        """Test the ego keeps cruising for the reaction time."""
        kin = simulate_kinematics(braking_scenario(reaction_frames=5))
        assert np.all(kin.ego_speed[:10] == 2.0)
        assert kin.ego_speed[10] < 2.0

    def test_cruise_profile_ramps(self):
        """Test a speed change is followed at the comfort rate."""
        cfg = braking_scenario(ego_speed=((0, 2.0), (10, 2.5)), braking_events=())
        kin = simulate_kinematics(cfg)
        assert kin.lead_speed[10] == pytest.approx(2.02)
        assert np.all(np.abs(np.diff(kin.lead_speed)) <= 0.02 + 1e-12)

    def test_collision(self):
        """Test a lead braking right in front of the ego is a collision."""
        cfg = braking_scenario(
            lead=LeadVehicle(initial_gap=3.0), braking_events=(BrakingEvent(2, 0.5, 0),)
        )
        with pytest.raises(CollisionError, match="gap reached"):
            simulate_kinematics(cfg)

    def test_collision_exit_code(self):
        """Test collisions map to exit code 2."""
        assert CollisionError("x").exit_code == 2

    def test_braking_past_clip_end(self):
        """Test an event that cannot stop inside the clip is rejected."""
        with pytest.raises(VadConfigError, match="needs"):
            braking_scenario(braking_events=(BrakingEvent(27, 0.4, 0),))

    def test_profile_must_start_at_zero(self):
        """Test the cruise profile starts at frame 0."""
        with pytest.raises(VadConfigError, match="frame 0"):
            braking_scenario(ego_speed=((3, 2.0),))


@pytest.mark.unit
class TestRendering:
    """Frames, boxes, masks and motion."""

    def test_shapes_and_range(self):
        """Test output shapes and the [0, 1] pixel range."""
        sequence, truth = generate_scenario(braking_scenario())
        assert sequence.frames.shape == (30, 32, 32, 3)
        assert sequence.motion.shape == (29, 2, 32, 32)
        assert truth.masks.shape == (30, 32, 32)
        assert sequence.frames.min() >= 0.0 and sequence.frames.max() <= 1.0

    def test_deterministic(self):
        """Test rendering twice gives identical arrays."""
        cfg = braking_scenario(weather=Weather(0.03, 0.15), environment="highway")
        first, _ = generate_scenario(cfg)
        second, _ = generate_scenario(cfg)
        assert np.array_equal(first.frames, second.frames)
        assert np.array_equal(first.motion, second.motion)

    def test_lead_is_track_zero(self):
        """Test every frame holds exactly one lead box."""
        cfg = braking_scenario(agents=(AgentSpec(lane=14.0, initial_gap=40.0),))
        _, truth = generate_scenario(cfg)
        for boxes in truth.boxes:
            assert [b.track_id for b in boxes].count(LEAD_TRACK) == 1

    def test_masks_inside_lead_box(self):
        """Test anomaly pixels lie inside the lead box of their frame."""
        _, truth = generate_scenario(braking_scenario())
        for t, boxes in enumerate(truth.boxes):
            lead = [b for b in boxes if b.track_id == LEAD_TRACK]
            allowed = union_mask(lead, 32, 32)
            assert not np.any(truth.masks[t] & ~allowed)

    def test_anomalous_frames_are_braking_frames(self):
        """Test frames are flagged exactly while the lead brakes."""
        _, truth = generate_scenario(braking_scenario())
        assert truth.anomalous_frames == [5, 6, 7, 8, 9]

    def test_normal_clip_has_no_anomaly(self):
        """Test a clip without braking has empty masks."""
        _, truth = generate_scenario(braking_scenario(braking_events=()))
        assert not truth.flags.any()
        assert not truth.masks.any()

    def test_lead_grows_while_gap_closes(self):
        """Test the lead box gets larger as the ego approaches."""
        _, truth = generate_scenario(braking_scenario())
        first = truth.boxes[0][0]
        later = truth.boxes[14][0]
        assert later.area > first.area

    def test_ground_truth_json(self):
        """Test the ground-truth document carries labels and kinematics."""
        cfg = braking_scenario()
        _, truth = generate_scenario(cfg)
        doc = truth.to_json(cfg)
        assert doc["weather"] == "clear"
        assert doc["anomaly"][5] is True and doc["anomaly"][4] is False
        assert len(doc["lead_gap"]) == 30


@pytest.mark.unit
class TestSplits:
    """Scenario sampling."""

    def test_ids_and_labels(self, tiny_config):
        """Test split ids and that only test scenarios brake."""
        splits = sample_splits(tiny_config.data, tiny_config.seed)
        assert [c.scenario_id for c in splits["train"]] == ["train_000", "train_001"]
        assert [c.scenario_id for c in splits["test"]] == ["test_000", "test_001"]
        assert all(not c.braking_events for c in splits["train"])
        assert all(len(c.braking_events) == 1 for c in splits["test"])

    def test_onset_in_range(self, tiny_config):
        """Test braking onsets fall inside the configured window."""
        for cfg in sample_splits(tiny_config.data, tiny_config.seed)["test"]:
            assert 6 <= cfg.braking_events[0].onset_frame <= 12

    def test_environment_and_weather_cycle(self, tiny_config):
        """Test subsets alternate environment first, then weather."""
        train = sample_splits(tiny_config.data, tiny_config.seed)["train"]
        assert [(c.environment, c.weather.name) for c in train] == [
            ("city", "clear"),
            ("highway", "clear"),
        ]

    def test_seeded(self, tiny_config):
        """Test the same seed gives the same configs and another seed does not."""
        a = sample_splits(tiny_config.data, 3)
        assert a == sample_splits(tiny_config.data, 3)
        assert a != sample_splits(tiny_config.data, 4)


@pytest.mark.unit
class TestDataset:
    """Dataset files and manifest."""

    def test_layout(self, memory_storage, tiny_config):
        """Test every scenario directory holds its four files."""
        splits = sample_splits(tiny_config.data, tiny_config.seed)
        build_dataset(memory_storage, splits)
        for name in ("frames.vadt", "masks.vadt", "gt_flows.vadt", "gt.json"):
            assert memory_storage.exists(f"test/test_001/{name}")
        frames = load_tensors(memory_storage, "train/train_000/frames.vadt")["frames"]
        assert frames.shape == (24, 32, 32, 3)

    def test_manifest_round_trip(self, memory_storage, tiny_config):
        """Test the manifest restores the exact scenario configs."""
        splits = sample_splits(tiny_config.data, tiny_config.seed)
        build_dataset(memory_storage, splits)
        assert load_manifest(memory_storage) == splits

    def test_rebuild_is_byte_identical(self, memory_storage, tiny_config):
        """Test regenerating from the manifest reproduces every file."""
        build_dataset(memory_storage, sample_splits(tiny_config.data, tiny_config.seed))
        before = memory_storage.sha256("test/test_000/frames.vadt")
        rebuild_dataset(memory_storage)
        assert memory_storage.sha256("test/test_000/frames.vadt") == before

    def test_train_with_braking_rejected(self, memory_storage):
        """Test a braking scenario cannot be placed in the train split."""
        with pytest.raises(VadConfigError, match="has braking"):
            build_dataset(memory_storage, {"train": [braking_scenario()]})

    def test_missing_manifest(self, memory_storage):
        """Test loading before generation names the gen stage."""
        with pytest.raises(MissingPrerequisiteError, match="gen"):
            load_manifest(memory_storage)
