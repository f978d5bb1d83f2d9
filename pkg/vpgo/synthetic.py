"""Flat-shaded top-down renderer for desk-scale grasping episodes."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from vpgo.action_hierarchy import GRIPPER_OPEN, stage_of
from vpgo.schemas import Movement, SceneConfig, Stage

log = logging.getLogger(__name__)

WALL = (70, 70, 70)
FLOOR = (120, 120, 120)
MARKER_OPEN = (245, 245, 245)
MARKER_CLOSED = (255, 140, 0)
BLOCK_COLORS = (
    (220, 60, 60),
    (60, 170, 60),
    (60, 90, 220),
    (230, 200, 40),
    (170, 70, 200),
    (40, 190, 200),
)
WALL_PX = 2


@dataclass
class Block:
    row: int
    col: int
    size: int
    color: Tuple[int, int, int]

    def contains(self, row: int, col: int) -> bool:
        return self.row <= row < self.row + self.size and self.col <= col < self.col + self.size

    def overlaps(self, other: "Block") -> bool:
        return not (
            self.row + self.size <= other.row or other.row + other.size <= self.row
            or self.col + self.size <= other.col or other.col + other.size <= self.col
        )

    @property
    def centroid(self) -> Tuple[float, float]:
        return self.row + (self.size - 1) / 2.0, self.col + (self.size - 1) / 2.0


@dataclass
class SceneState:
    """Mutable scene: blocks, gripper marker pixel, end-effector pose."""
    blocks: List[Block]
    marker: Tuple[int, int]
    position: np.ndarray
    gripper: float = GRIPPER_OPEN
    held: Optional[int] = None
    grasp_attempts: List[bool] = field(default_factory=list)


def world_to_pixel(cfg: SceneConfig, x: float, y: float) -> Tuple[int, int]:
    """(row, col) of a floor point; the image centre is the world origin."""
    ppm = cfg.pixels_per_meter
    return int(np.rint(cfg.height / 2 + y * ppm)), int(np.rint(cfg.width / 2 + x * ppm))


def pixel_delta(cfg: SceneConfig, delta: Sequence[float]) -> Tuple[int, int]:
    """Marker displacement (drow, dcol) produced by one movement."""
    ppm = cfg.pixels_per_meter
    return int(np.rint(ppm * delta[1])), int(np.rint(ppm * delta[0]))


def _fill(img: np.ndarray, row: int, col: int, h: int, w: int, color) -> None:
    r0, c0 = max(row, 0), max(col, 0)
    r1, c1 = min(row + h, img.shape[0]), min(col + w, img.shape[1])
    if r0 < r1 and c0 < c1:
        img[r0:r1, c0:c1] = color


def marker_radius(cfg: SceneConfig, z: float) -> int:
    """Marker half-size grows with height so descents are visible from above."""
    frac = (z - cfg.block_z) / (cfg.top_height - cfg.block_z)
    return int(np.clip(1 + np.rint(2 * frac), 1, 3))


def render(cfg: SceneConfig, state: SceneState) -> np.ndarray:
    img = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
    img[:] = WALL
    img[WALL_PX:-WALL_PX, WALL_PX:-WALL_PX] = FLOOR
    for i, block in enumerate(state.blocks):
        if i != state.held:
            _fill(img, block.row, block.col, block.size, block.size, block.color)
    if state.held is not None:
        block = state.blocks[state.held]
        _fill(img, block.row, block.col, block.size, block.size, block.color)
    radius = marker_radius(cfg, float(state.position[2]))
    color = MARKER_CLOSED if state.gripper >= 0.5 else MARKER_OPEN
    row, col = state.marker
    _fill(img, row - radius, col - radius, 2 * radius + 1, 2 * radius + 1, color)
    return img


def step(cfg: SceneConfig, state: SceneState, movement: Movement, rng: np.random.Generator) -> SceneState:
    """Advance the scene by one movement (in place)."""
    drow, dcol = pixel_delta(cfg, movement.delta)
    row, col = state.marker
    state.marker = (row + drow, col + dcol)
    state.position = state.position + np.asarray(movement.delta[:3], dtype=np.float64)
    if state.held is not None:
        block = state.blocks[state.held]
        block.row += drow
        block.col += dcol

    previous, state.gripper = state.gripper, movement.gripper
    if previous < 0.5 <= state.gripper:
        under = [i for i, b in enumerate(state.blocks) if b.contains(*state.marker)]
        if under:
            success = bool(rng.random() < cfg.grasp_success_prob)
            state.grasp_attempts.append(success)
            if success:
                state.held = under[-1]
            log.debug("grasp at %s on block %d: %s", state.marker, under[-1], success)
    elif previous >= 0.5 > state.gripper:
        state.held = None
    return state


def simulate_episode(
    cfg: SceneConfig,
    state: SceneState,
    movements: Sequence[Movement],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, List[Stage]]:
    """
    Render a movement sequence.

    Args:
        cfg: Scene configuration
        state: Initial scene (mutated)
        movements: One movement per transition
        rng: Generator for grasp outcomes

    Returns:
        frames (T, H, W, 3) uint8, end-effector states (T, 3) float32, and
        per-frame stage labels (frame t takes the stage of movement t-1)
    """
    frames = [render(cfg, state)]
    states = [state.position.copy()]
    stages = [stage_of(movements[0].kind) if movements else Stage.NONE]
    for movement in movements:
        step(cfg, state, movement, rng)
        frames.append(render(cfg, state))
        states.append(state.position.copy())
        stages.append(stage_of(movement.kind))
    return np.stack(frames), np.asarray(states, dtype=np.float32), stages


def place_blocks(
    cfg: SceneConfig,
    target_center: Tuple[int, int],
    rng: np.random.Generator,
    attempts: int = 50,
) -> List[Block]:
    """Target block centred on `target_center`, distractors scattered without overlap."""
    size = cfg.block_size_px
    palette = list(rng.permutation(len(BLOCK_COLORS)))
    target = Block(row=target_center[0] - size // 2, col=target_center[1] - size // 2,
                   size=size, color=BLOCK_COLORS[palette[0]])
    blocks = [target]
    lo = WALL_PX
    for k in range(1, cfg.n_blocks):
        for _ in range(attempts):
            candidate = Block(
                row=int(rng.integers(lo, cfg.height - lo - size + 1)),
                col=int(rng.integers(lo, cfg.width - lo - size + 1)),
                size=size,
                color=BLOCK_COLORS[palette[k % len(palette)]],
            )
            if not any(candidate.overlaps(b) for b in blocks):
                blocks.append(candidate)
                break
        else:  # pragma: no cover
            log.warning("could not place distractor block %d without overlap", k)
    # Distractors first so the target is drawn on top.
    return blocks[1:] + blocks[:1]
