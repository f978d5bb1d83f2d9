import numpy as np
import pytest

from vpgo.action_hierarchy import decompose_to_movements
from vpgo.schemas import ElementKind, Movement, SceneConfig, SemanticGrasp, Stage
from vpgo.synthetic import (
    MARKER_CLOSED,
    SceneState,
    place_blocks,
    pixel_delta,
    render,
    simulate_episode,
    step,
    world_to_pixel,
)


def _episode(cfg, grasp, start):
    movements = decompose_to_movements(grasp, cfg.max_step, start=start)
    row, col = world_to_pixel(cfg, start[0], start[1])
    for m in movements:
        drow, dcol = pixel_delta(cfg, m.delta)
        row, col = row + drow, col + dcol
        if m.kind == ElementKind.DESCEND_AND_CLOSE and m.gripper >= 0.5:
            break
    blocks = place_blocks(cfg, (row, col), np.random.default_rng(0))
    state = SceneState(blocks=blocks, marker=world_to_pixel(cfg, start[0], start[1]),
                       position=np.asarray(start, dtype=np.float64))
    return movements, state


class TestRenderer:
    """Top-down rendering and scene stepping."""

    def test_render_shape_and_dtype(self, scene_cfg):
        state = SceneState(blocks=[], marker=(24, 32), position=np.array([0.0, 0.0, 0.25]))
        img = render(scene_cfg, state)
        assert img.shape == (48, 64, 3)
        assert img.dtype == np.uint8

    def test_zero_movements_keep_frames_identical(self, scene_cfg):
        blocks = place_blocks(scene_cfg, (24, 32), np.random.default_rng(1))
        state = SceneState(blocks=blocks, marker=(24, 32), position=np.array([0.0, 0.0, 0.25]))
        idle = [Movement(delta=(0.0, 0.0, 0.0), gripper=0.0, kind=ElementKind.TRANSPORT)] * 5
        frames, states, _ = simulate_episode(scene_cfg, state, idle, np.random.default_rng(0))
        assert all(np.array_equal(frames[0], f) for f in frames[1:])
        assert np.allclose(states, states[0])

    def test_marker_displacement_matches_rounded_delta(self, scene_cfg):
        grasp = SemanticGrasp(grasp_point=(0.05, 0.03, 0.02), drop_point=(-0.08, -0.05, 0.02), top_height=0.25)
        movements, state = _episode(scene_cfg, grasp, (0.0, 0.0, 0.25))
        rng = np.random.default_rng(0)
        for m in movements:
            before = state.marker
            step(scene_cfg, state, m, rng)
            drow, dcol = pixel_delta(scene_cfg, m.delta)
            assert state.marker == (before[0] + drow, before[1] + dcol)
            assert drow == int(np.rint(scene_cfg.pixels_per_meter * m.delta[1]))
            assert dcol == int(np.rint(scene_cfg.pixels_per_meter * m.delta[0]))

    def test_certain_grasp_moves_block_with_transport(self):
        cfg = SceneConfig(grasp_success_prob=1.0, n_blocks=1)
        grasp = SemanticGrasp(grasp_point=(0.05, 0.03, 0.02), drop_point=(-0.08, -0.05, 0.02), top_height=0.25)
        movements, state = _episode(cfg, grasp, (0.05, 0.03, 0.25))
        target = state.blocks[-1]
        start_centroid = np.array(target.centroid)
        simulate_episode(cfg, state, movements, np.random.default_rng(0))
        shift = np.zeros(2)
        for m in movements:
            if m.kind == ElementKind.TRANSPORT:
                shift += pixel_delta(cfg, m.delta)
        assert state.grasp_attempts == [True]
        np.testing.assert_array_equal(np.array(target.centroid) - start_centroid, shift)

    def test_failed_grasp_leaves_block(self):
        cfg = SceneConfig(grasp_success_prob=0.0, n_blocks=1)
        grasp = SemanticGrasp(grasp_point=(0.05, 0.03, 0.02), drop_point=(-0.08, -0.05, 0.02), top_height=0.25)
        movements, state = _episode(cfg, grasp, (0.05, 0.03, 0.25))
        before = state.blocks[-1].centroid
        simulate_episode(cfg, state, movements, np.random.default_rng(0))
        assert state.grasp_attempts == [False]
        assert state.blocks[-1].centroid == before

    def test_uncertain_grasp_gives_distinct_outcomes(self):
        """The same action sequence ends in different final frames when grasps fail half the time."""
        cfg = SceneConfig(grasp_success_prob=0.5, n_blocks=1)
        grasp = SemanticGrasp(grasp_point=(0.05, 0.03, 0.02), drop_point=(-0.08, -0.05, 0.02), top_height=0.25)
        finals, outcomes = set(), set()
        for seed in range(20):
            movements, state = _episode(cfg, grasp, (0.05, 0.03, 0.25))
            frames, _, _ = simulate_episode(cfg, state, movements, np.random.default_rng(seed))
            finals.add(frames[-1].tobytes())
            outcomes.add(tuple(state.grasp_attempts))
        assert outcomes == {(True,), (False,)}
        assert len(finals) >= 2

    def test_closed_marker_color(self, scene_cfg):
        state = SceneState(blocks=[], marker=(24, 32), position=np.array([0.0, 0.0, 0.25]), gripper=1.0)
        assert tuple(render(scene_cfg, state)[24, 32]) == MARKER_CLOSED

    def test_stage_labels_follow_movements(self, scene_cfg):
        grasp = SemanticGrasp(grasp_point=(0.05, 0.03, 0.02), drop_point=(-0.08, -0.05, 0.02), top_height=0.25)
        movements, state = _episode(scene_cfg, grasp, (0.0, 0.0, 0.25))
        _, _, stages = simulate_episode(scene_cfg, state, movements, np.random.default_rng(0))
        assert len(stages) == len(movements) + 1
        assert stages[0] == Stage.APPROACHING
        assert stages[-1] == Stage.MOVING
        order = [Stage.APPROACHING, Stage.GRASPING, Stage.MOVING]
        assert [order.index(s) for s in stages] == sorted(order.index(s) for s in stages)


class TestPlaceBlocks:
    def test_target_last_and_centred(self, scene_cfg):
        blocks = place_blocks(scene_cfg, (20, 30), np.random.default_rng(3))
        target = blocks[-1]
        assert target.contains(20, 30)
        assert len(blocks) <= scene_cfg.n_blocks

    def test_no_overlap(self, scene_cfg):
        blocks = place_blocks(scene_cfg, (20, 30), np.random.default_rng(4))
        for i, a in enumerate(blocks):
            for b in blocks[i + 1:]:
                assert not a.overlaps(b)


@pytest.mark.parametrize("x,y", [(0.0, 0.0), (0.1, -0.05)])
def test_world_to_pixel_origin_is_centre(scene_cfg, x, y):
    row, col = world_to_pixel(scene_cfg, x, y)
    assert row == int(np.rint(24 + 100 * y))
    assert col == int(np.rint(32 + 100 * x))
