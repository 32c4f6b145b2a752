"""Tests for the detector stub, track linking, cube extraction and scatter."""

import numpy as np
import pytest

from genro_vad.boxes import DETECTED, BBox
from genro_vad.cubes import (
    AnomalyMap,
    DetectorStub,
    crop_flow,
    detect_boxes,
    detect_sequence,
    extract_stc,
    iter_cubes,
    link_tracks,
    scatter_patch,
    stack_cubes,
)
from genro_vad.exceptions import DimensionError, VadConfigError


def moving_clip(num_frames=6, size=32):
    """Frames whose pixel values encode the frame index, one box drifting right."""
    frames = np.zeros((num_frames, size, size, 3), dtype=np.float32)
    for t in range(num_frames):
        frames[t] = t / 10.0
    flows = np.zeros((num_frames - 1, 2, size, size), dtype=np.float32)
    flows[:, 0] = 2.0
    tracks = [[BBox(4 + t, 8, 20 + t, 24, track_id=5)] for t in range(num_frames)]
    return frames, flows, tracks


@pytest.mark.unit
class TestDetectorStub:
    """Degradation of ground-truth boxes."""

    def test_identity_stub(self):
        """Test a stub without noise copies boxes and marks them detected."""
        box = BBox(3, 4, 13, 12, track_id=2)
        (out,) = detect_boxes([box], DetectorStub(), 0, 32, 32)
        assert (out.x_min, out.y_min, out.x_max, out.y_max) == (3, 4, 13, 12)
        assert out.provenance == DETECTED and out.track_id == 2

    def test_size_bias(self):
        """Test boxes are scaled around their centre."""
        (out,) = detect_boxes([BBox(10, 10, 20, 20)], DetectorStub(size_bias=2.0), 0, 64, 64)
        assert (out.x_min, out.y_min, out.x_max, out.y_max) == (5, 5, 25, 25)

    def test_clipped_to_frame(self):
        """Test enlarged boxes stay inside the frame."""
        (out,) = detect_boxes([BBox(0, 0, 10, 10)], DetectorStub(size_bias=3.0), 0, 16, 16)
        assert (out.x_min, out.y_min, out.x_max, out.y_max) == (0, 0, 16, 16)

    def test_full_miss_rate(self):
        """Test a miss rate of 1 drops everything."""
        assert detect_boxes([BBox(0, 0, 20, 20)], DetectorStub(miss_rate=1.0), 0, 32, 32) == []

    def test_track_miss_rate(self):
        """Test a per-track rate only affects that track."""
        boxes = [BBox(0, 0, 20, 20, track_id=0), BBox(0, 0, 20, 20, track_id=1)]
        out = detect_boxes(boxes, DetectorStub(track_miss_rate={0: 1.0}), 0, 32, 32)
        assert [b.track_id for b in out] == [1]

    def test_small_boxes_missed_more(self):
        """Test the distance boost applies below the area threshold."""
        stub = DetectorStub(distance_miss_boost=1.0, small_area=50)
        boxes = [BBox(0, 0, 5, 5, track_id=0), BBox(0, 0, 10, 10, track_id=1)]
        assert [b.track_id for b in detect_boxes(boxes, stub, 0, 32, 32)] == [1]

    def test_draws_keyed_by_frame_and_track(self):
        """Test a box's fate does not depend on the other boxes of the frame."""
        stub = DetectorStub(miss_rate=0.5, jitter=2.0, seed=3)
        a = BBox(2, 2, 20, 20, track_id=4)
        b = BBox(10, 10, 30, 30, track_id=9)
        for frame in range(10):
            alone = detect_boxes([a], stub, frame, 32, 32)
            together = [x for x in detect_boxes([b, a], stub, frame, 32, 32) if x.track_id == 4]
            assert alone == together

    def test_invalid_rates(self):
        """Test probabilities outside [0, 1] are rejected."""
        with pytest.raises(VadConfigError, match="miss_rate"):
            DetectorStub(miss_rate=1.5)
        with pytest.raises(VadConfigError, match="track_miss_rate"):
            DetectorStub(track_miss_rate={0: -0.1})


@pytest.mark.unit
class TestLinkTracks:
    """Greedy IoU linking."""

    def test_moving_box_keeps_identity(self):
        """Test overlapping boxes in consecutive frames share a track."""
        frames = [[BBox(0, 0, 10, 10)], [BBox(1, 0, 11, 10)], [BBox(2, 0, 12, 10)]]
        linked = link_tracks(frames)
        assert [boxes[0].track_id for boxes in linked] == [0, 0, 0]

    def test_new_object_new_track(self):
        """Test a box without overlap starts a new track."""
        frames = [[BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]]
        linked = link_tracks(frames)
        assert sorted(b.track_id for b in linked[1]) == [0, 1]

    def test_gap_breaks_track(self):
        """Test a missed frame makes the object reappear with a new id."""
        frames = [[BBox(0, 0, 10, 10)], [], [BBox(0, 0, 10, 10)]]
        linked = link_tracks(frames)
        assert linked[0][0].track_id != linked[2][0].track_id

    def test_low_overlap_not_linked(self):
        """Test pairs under the IoU threshold are not linked."""
        frames = [[BBox(0, 0, 10, 10)], [BBox(8, 0, 18, 10)]]
        linked = link_tracks(frames)
        assert linked[0][0].track_id != linked[1][0].track_id

    def test_detect_sequence(self):
        """Test detection plus linking on a clean clip keeps one track."""
        gt = [[BBox(t, 0, t + 10, 10, track_id=7)] for t in range(4)]
        out = detect_sequence(gt, DetectorStub(), 16, 32)
        assert all(len(boxes) == 1 for boxes in out)
        assert len({boxes[0].track_id for boxes in out}) == 1


@pytest.mark.unit
class TestExtract:
    """Spatiotemporal cubes."""

    def test_shapes_and_region(self):
        """Test cube arrays and that the crop region is the box at t+1."""
        frames, flows, tracks = moving_clip()
        (cube,) = extract_stc(frames, flows, tracks, t=3, t_len=3, size=8)
        assert cube.img_window.shape == (3, 3, 8, 8)
        assert cube.flow_window.shape == (2, 2, 8, 8)
        assert cube.target_img.shape == (3, 8, 8)
        assert cube.frame_index == 3 and cube.target_frame == 4
        assert cube.box_at_t1 == tracks[4][0]
        assert cube.box_at_t == tracks[3][0]

    def test_frame_order(self):
        """Test crops are ordered oldest first and the target is frame t+1."""
        frames, flows, tracks = moving_clip()
        (cube,) = extract_stc(frames, flows, tracks, t=3, t_len=3, size=8)
        np.testing.assert_allclose(cube.img_window[:, 0, 0, 0], [0.1, 0.2, 0.3], rtol=1e-5)
        np.testing.assert_allclose(cube.target_img, 0.4, rtol=1e-5)

    def test_flow_rescaled_with_crop(self):
        """Test displacements scale by the crop's resize factor."""
        frames, flows, tracks = moving_clip()
        (cube,) = extract_stc(frames, flows, tracks, t=3, t_len=3, size=8)
        np.testing.assert_allclose(cube.flow_window[:, 0], 2.0 * 8 / 16, rtol=1e-5)
        np.testing.assert_allclose(cube.flow_window[:, 1], 0.0)

    def test_crop_flow_axes(self):
        """Test u scales with the width and v with the height."""
        flow = np.ones((2, 20, 20))
        patch = crop_flow(flow, (0, 0, 16, 4), 8)
        np.testing.assert_allclose(patch[0], 0.5)
        np.testing.assert_allclose(patch[1], 2.0)

    def test_window_needs_track_in_every_frame(self):
        """Test a track missing inside the window yields no cube."""
        frames, flows, tracks = moving_clip()
        tracks[2] = []
        assert extract_stc(frames, flows, tracks, t=3, t_len=3, size=8) == []

    def test_degenerate_box_skipped(self, caplog):
        """Test boxes below the minimum side are skipped with a warning."""
        frames, flows, tracks = moving_clip()
        tracks[4] = [BBox(4, 8, 5, 24, track_id=5)]
        assert extract_stc(frames, flows, tracks, t=3, t_len=3, size=8, min_side=2) == []
        assert "degenerate" in caplog.text

    def test_margin_enlarges_region(self):
        """Test a margin grows the region and stays inside the frame."""
        frames, flows, tracks = moving_clip()
        frames[4, :, :] = 0.0
        frames[4, 8:24, 8:24] = 1.0
        (tight,) = extract_stc(frames, flows, tracks, t=3, t_len=3, size=8)
        (loose,) = extract_stc(frames, flows, tracks, t=3, t_len=3, size=8, margin=0.5)
        assert loose.target_img.mean() < tight.target_img.mean()

    def test_anchor_out_of_range(self):
        """Test an anchor without room for the window or target is rejected."""
        frames, flows, tracks = moving_clip()
        with pytest.raises(DimensionError):
            extract_stc(frames, flows, tracks, t=1, t_len=3)
        with pytest.raises(DimensionError):
            extract_stc(frames, flows, tracks, t=5, t_len=3)

    def test_iter_cubes_stride(self):
        """Test anchors run from t_len-1 to T-2 in steps of stride."""
        frames, flows, tracks = moving_clip(num_frames=8)
        assert [c.frame_index for c in iter_cubes(frames, flows, tracks, 3, 8)] == [2, 3, 4, 5, 6]
        assert [c.frame_index for c in iter_cubes(frames, flows, tracks, 3, 8, stride=2)] == [2, 4, 6]


@pytest.mark.unit
class TestStack:
    """Network batches."""

    def test_channel_layout(self):
        """Test frames are flattened into channels in time order."""
        frames, flows, tracks = moving_clip()
        cubes = list(iter_cubes(frames, flows, tracks, 3, 8))
        batch = stack_cubes(cubes)
        assert batch.images.shape == (len(cubes), 9, 8, 8)
        assert batch.flows.shape == (len(cubes), 4, 8, 8)
        assert batch.targets.shape == (len(cubes), 3, 8, 8)
        np.testing.assert_allclose(batch.images[0, 3:6], cubes[0].img_window[1])
        assert len(batch.take(np.array([0]))) == 1

    def test_empty(self):
        """Test stacking nothing is an error."""
        with pytest.raises(DimensionError):
            stack_cubes([])


@pytest.mark.unit
class TestScatter:
    """Patches scattered back into frames."""

    def test_outside_boxes_is_zero(self):
        """Test only the box area receives scores."""
        amap = scatter_patch(AnomalyMap.empty(8, 8), BBox(2, 2, 6, 6), np.full((4, 4), 3.0))
        assert amap.scores[2:6, 2:6] == pytest.approx(np.full((4, 4), 3.0))
        assert amap.scores.sum() == pytest.approx(48.0)
        assert amap.covered.sum() == 16

    def test_overlap_takes_maximum(self):
        """Test overlapping patches merge by per-pixel maximum."""
        amap = AnomalyMap.empty(8, 8)
        amap = scatter_patch(amap, BBox(0, 0, 4, 4), np.full((2, 2), 1.0))
        amap = scatter_patch(amap, BBox(2, 2, 6, 6), np.full((2, 2), -1.0))
        assert amap.scores[3, 3] == pytest.approx(1.0)
        assert amap.scores[5, 5] == pytest.approx(-1.0)

    def test_input_map_unchanged(self):
        """Test scatter returns a new map."""
        empty = AnomalyMap.empty(4, 4)
        scatter_patch(empty, BBox(0, 0, 4, 4), np.ones((2, 2)))
        assert not empty.covered.any()

    def test_box_partly_outside(self):
        """Test a box hanging over the border is clipped."""
        amap = scatter_patch(AnomalyMap.empty(4, 4), BBox(-2, -2, 2, 2), np.ones((4, 4)))
        assert amap.covered.sum() == 4

    def test_clamped(self):
        """Test negative scores clamp to zero."""
        amap = AnomalyMap(np.array([[-1.0, 2.0]]), np.ones((1, 2), dtype=bool))
        np.testing.assert_array_equal(amap.clamped(), [[0.0, 2.0]])
