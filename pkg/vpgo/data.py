"""Trajectory containers, HDF5 loaders, training windows and synthetic data."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import h5py
import numpy as np
import torch
import torch.nn.functional as F

from vpgo.action_hierarchy import decompose_to_movements, movements_to_actions
from vpgo.config import validate_section
from vpgo.errors import (
    ConfigError,
    CorruptFileError,
    EmptyDatasetError,
    InvalidTrajectoryError,
    LengthMismatchError,
    MissingArrayError,
    TrajectoryExportError,
    TrajectoryLoadError,
    WindowRangeError,
)
from vpgo.schemas import ElementKind, Movement, SceneConfig, SemanticGrasp, Stage
from vpgo.synthetic import SceneState, place_blocks, pixel_delta, simulate_episode, world_to_pixel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FRAME_SIZE = (48, 64)
TrajectoryFormat = Literal["robonet_hdf5", "pandagrasp"]

# Dataset paths per container layout
_LAYOUTS = {
    "pandagrasp": {"frames": "frames", "actions": "actions", "states": "states"},
    "robonet_hdf5": {"frames": "env/cam{camera}_video/frames", "actions": "policy/actions", "states": "env/state"},
}


@dataclass
class TrajectoryMeta:
    source: str = "synthetic"
    camera: int = 0
    robot: str = "panda"


@dataclass
class Trajectory:
    """Aligned frames, actions and optional robot states of one episode."""
    frames: np.ndarray
    actions: np.ndarray
    states: Optional[np.ndarray] = None
    stage_labels: Optional[List[Stage]] = None
    meta: TrajectoryMeta = field(default_factory=TrajectoryMeta)

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    def validate(self, frame_size: Optional[Tuple[int, int]] = FRAME_SIZE) -> "Trajectory":
        """
        Check the trajectory invariants.

        Raises:
            InvalidTrajectoryError: If any invariant fails
        """
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3 or f.dtype != np.uint8:
            raise InvalidTrajectoryError(f"frames must be uint8 (T, H, W, 3), got {f.dtype} {f.shape}")
        if frame_size is not None and tuple(f.shape[1:3]) != tuple(frame_size):
            raise InvalidTrajectoryError(f"frames must be {frame_size}, got {f.shape[1:3]}")
        if self.length < 2:
            raise InvalidTrajectoryError("a trajectory needs at least 2 frames")
        if self.actions.ndim != 2 or self.actions.shape[0] != self.length - 1:
            raise InvalidTrajectoryError(
                f"actions must be (T-1, n_a) = ({self.length - 1}, n_a), got {self.actions.shape}"
            )
        if not np.all(np.isfinite(self.actions)):
            raise InvalidTrajectoryError("actions contain non-finite values")
        if self.states is not None:
            if self.states.ndim != 2 or self.states.shape[0] != self.length:
                raise InvalidTrajectoryError(f"states must be (T, n_s), got {self.states.shape}")
            if not np.all(np.isfinite(self.states)):
                raise InvalidTrajectoryError("states contain non-finite values")
        if self.stage_labels is not None and len(self.stage_labels) != self.length:
            raise InvalidTrajectoryError("stage_labels must have one entry per frame")
        return self


@dataclass
class TrainingWindow:
    """c context frames, `horizon` targets and the actions linking them."""
    context: np.ndarray
    targets: np.ndarray
    actions: np.ndarray
    states: Optional[np.ndarray] = None
    stage_labels: Optional[List[Stage]] = None
    offset: int = 0

    @property
    def c(self) -> int:
        return int(self.context.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.targets.shape[0])

    @property
    def frames(self) -> np.ndarray:
        return np.concatenate([self.context, self.targets], axis=0)


@dataclass
class Batch:
    """Channel-first torch tensors of stacked windows."""
    frames: torch.Tensor
    actions: torch.Tensor
    states: Optional[torch.Tensor] = None

    def to(self, device: Union[str, torch.device] = "cpu", dtype: torch.dtype = torch.float32) -> "Batch":
        return Batch(
            frames=self.frames.to(device=device, dtype=dtype),
            actions=self.actions.to(device=device, dtype=dtype),
            states=None if self.states is None else self.states.to(device=device, dtype=dtype),
        )


# ----- Loading and export -----

def _resize(frames: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of uint8 (T, H, W, 3) frames."""
    if tuple(frames.shape[1:3]) == tuple(size):
        return frames
    x = torch.from_numpy(frames.astype(np.float32)).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    x = x.round().clamp(0, 255).to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous().numpy()


def _attr_str(value: Any) -> str:
    return value.decode("utf-8") if isinstance(value, bytes) else str(value)


def _dataset_paths(fmt: str, camera: int) -> Dict[str, str]:
    if fmt not in _LAYOUTS:
        raise ConfigError(f"unknown trajectory format {fmt!r}", key="format")
    return {k: v.format(camera=camera) for k, v in _LAYOUTS[fmt].items()}


def load_trajectory(
    path: Union[str, Path],
    format: TrajectoryFormat = "pandagrasp",
    frame_size: Tuple[int, int] = FRAME_SIZE,
) -> Trajectory:
    """
    Read one trajectory container.

    Args:
        path: HDF5 file
        format: Container layout, "pandagrasp" or "robonet_hdf5"
        frame_size: Target (H, W); other sizes are bilinearly resized

    Returns:
        Validated Trajectory

    Raises:
        TrajectoryLoadError: If the file does not exist
        CorruptFileError: If it is not a readable container
        MissingArrayError: If frames or actions are absent
        LengthMismatchError: If array lengths disagree
    """
    path = Path(path)
    if not path.is_file():
        raise TrajectoryLoadError(f"trajectory file not found: {path}")
    try:
        handle = h5py.File(path, "r")
    except OSError as e:
        raise CorruptFileError(f"cannot open {path}: {e}") from e

    with handle as f:
        camera = int(f.attrs.get("camera", 0))
        paths = _dataset_paths(format, camera)
        arrays = {}
        for name in ("frames", "actions", "states"):
            if paths[name] in f:
                try:
                    arrays[name] = f[paths[name]][()]
                except (OSError, KeyError) as e:
                    raise CorruptFileError(f"cannot read {paths[name]} in {path}: {e}") from e
            elif name != "states":
                raise MissingArrayError(f"{path} has no {paths[name]!r} array")
        labels_raw = f.attrs.get("stage_labels")
        meta = TrajectoryMeta(
            source=_attr_str(f.attrs.get("source", format)),
            camera=camera,
            robot=_attr_str(f.attrs.get("robot", "unknown")),
        )

    frames = np.asarray(arrays["frames"])
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise CorruptFileError(f"{path}: frames must be (T, H, W, 3), got {frames.shape}")
    frames = _resize(frames.astype(np.uint8), frame_size)
    actions = np.asarray(arrays["actions"], dtype=np.float32)
    states = arrays.get("states")
    states = None if states is None else np.asarray(states, dtype=np.float32)

    T = frames.shape[0]
    if T < 2:
        raise LengthMismatchError(f"{path}: need at least 2 frames, got {T}")
    if actions.ndim != 2 or actions.shape[0] != T - 1:
        raise LengthMismatchError(f"{path}: {T} frames need {T - 1} actions, got {actions.shape[0]}")
    if states is not None and states.shape[0] != T:
        raise LengthMismatchError(f"{path}: {T} frames need {T} states, got {states.shape[0]}")

    stage_labels = None
    if labels_raw is not None:
        stage_labels = [Stage(s) for s in json.loads(_attr_str(labels_raw))]
        if len(stage_labels) != T:
            raise LengthMismatchError(f"{path}: {T} frames need {T} stage labels")

    traj = Trajectory(frames=frames, actions=actions, states=states, stage_labels=stage_labels, meta=meta)
    try:
        return traj.validate(frame_size)
    except InvalidTrajectoryError as e:
        raise CorruptFileError(f"{path}: {e}") from e


def export_trajectory(t: Trajectory, path: Union[str, Path], format: TrajectoryFormat = "pandagrasp") -> None:
    """
    Write a trajectory container; byte-identical for identical input.

    Raises:
        InvalidTrajectoryError: If `t` violates its invariants
        TrajectoryExportError: If the path cannot be written
    """
    t.validate(frame_size=None)
    paths = _dataset_paths(format, t.meta.camera)
    path = Path(path)
    attrs = {
        "camera": int(t.meta.camera),
        "format_version": FORMAT_VERSION,
        "robot": t.meta.robot,
        "source": t.meta.source,
    }
    if t.stage_labels is not None:
        attrs["stage_labels"] = json.dumps([s.value for s in t.stage_labels])
    try:
        with h5py.File(path, "w", libver="earliest", track_order=False) as f:
            f.create_dataset(paths["frames"], data=t.frames.astype(np.uint8), track_times=False)
            f.create_dataset(paths["actions"], data=t.actions.astype("<f4"), track_times=False)
            if t.states is not None:
                f.create_dataset(paths["states"], data=t.states.astype("<f4"), track_times=False)
            for key in sorted(attrs):
                f.attrs[key] = attrs[key]
    except OSError as e:
        raise TrajectoryExportError(f"cannot write {path}: {e}") from e
    log.debug("exported trajectory T=%d to %s", t.length, path)


def load_directory(
    data_dir: Union[str, Path],
    format: TrajectoryFormat = "pandagrasp",
    frame_size: Tuple[int, int] = FRAME_SIZE,
) -> List[Trajectory]:
    """Load every *.h5 / *.hdf5 container under `data_dir`, sorted by name."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise TrajectoryLoadError(f"data directory not found: {data_dir}")
    files = sorted(p for p in data_dir.iterdir() if p.suffix in (".h5", ".hdf5"))
    trajectories = [load_trajectory(p, format, frame_size) for p in files]
    log.info("loaded %d trajectories from %s", len(trajectories), data_dir)
    return trajectories


# ----- Windows -----

def sample_window(
    t: Trajectory,
    c: int,
    horizon: int,
    offset: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrainingWindow:
    """
    Cut a (c + horizon)-frame window with its c + horizon - 1 actions.

    Args:
        t: Trajectory
        c: Context frames
        horizon: Target frames
        offset: First frame index; None draws one from `rng`
        rng: Generator owned by the calling worker

    Returns:
        TrainingWindow with intensities scaled to [0, 1]

    Raises:
        WindowRangeError: If the window does not fit
    """
    total = c + horizon
    if c < 1 or horizon < 1:
        raise WindowRangeError("c and horizon must be at least 1")
    if total > t.length:
        raise WindowRangeError(f"window of {total} frames exceeds trajectory of {t.length}")
    max_offset = t.length - total
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng()
        offset = int(rng.integers(0, max_offset + 1))
    elif not 0 <= offset <= max_offset:
        raise WindowRangeError(f"offset {offset} outside [0, {max_offset}]")

    frames = t.frames[offset:offset + total].astype(np.float32) / 255.0
    return TrainingWindow(
        context=frames[:c],
        targets=frames[c:],
        actions=t.actions[offset:offset + total - 1].astype(np.float32),
        states=None if t.states is None else t.states[offset:offset + total].astype(np.float32),
        stage_labels=None if t.stage_labels is None else list(t.stage_labels[offset + c:offset + total]),
        offset=offset,
    )


def collate(windows: Sequence[TrainingWindow]) -> Batch:
    """Stack windows into channel-first tensors."""
    frames = np.stack([w.frames for w in windows])
    states = None
    if all(w.states is not None for w in windows):
        states = torch.from_numpy(np.stack([w.states for w in windows]))
    return Batch(
        frames=torch.from_numpy(frames).permute(0, 1, 4, 2, 3).contiguous(),
        actions=torch.from_numpy(np.stack([w.actions for w in windows])),
        states=states,
    )


class WindowSampler:
    """Random windows from a trajectory pool; one sampler per worker."""

    def __init__(self, trajectories: Sequence[Trajectory], c: int, horizon: int, seed: int = 0):
        self.trajectories = [t for t in trajectories if t.length >= c + horizon]
        if not self.trajectories:
            raise EmptyDatasetError(f"no trajectory has the {c + horizon} frames a window needs")
        self.c = c
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)

    def sample(self) -> TrainingWindow:
        t = self.trajectories[int(self.rng.integers(0, len(self.trajectories)))]
        return sample_window(t, self.c, self.horizon, rng=self.rng)

    def batch(self, n: int) -> Batch:
        return collate([self.sample() for _ in range(n)])

    def get_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state


# ----- Synthetic data -----

def _synthetic_episode(cfg: SceneConfig, T: int, rng: np.random.Generator) -> Trajectory:
    hx, hy = cfg.half_extent
    margin = (cfg.block_size_px + 2) / cfg.pixels_per_meter
    lo = np.array([-hx + margin, -hy + margin])
    hi = np.array([hx - margin, hy - margin])

    grasp_xy = rng.uniform(lo, hi)
    start_xy = np.clip(grasp_xy + rng.uniform(-cfg.max_approach, cfg.max_approach, size=2), lo, hi)
    angle = rng.uniform(0.0, 2 * np.pi)
    distance = rng.uniform(cfg.min_transport, cfg.max_transport)
    drop_xy = np.clip(grasp_xy + distance * np.array([np.cos(angle), np.sin(angle)]), lo, hi)

    grasp = SemanticGrasp(
        grasp_point=(float(grasp_xy[0]), float(grasp_xy[1]), cfg.block_z),
        drop_point=(float(drop_xy[0]), float(drop_xy[1]), cfg.block_z),
        top_height=cfg.top_height,
    )
    start = (float(start_xy[0]), float(start_xy[1]), cfg.top_height)
    movements = decompose_to_movements(grasp, cfg.max_step, start=start, dof=cfg.dof)

    # The target block sits where the marker actually closes.
    row, col = world_to_pixel(cfg, start[0], start[1])
    for m in movements:
        drow, dcol = pixel_delta(cfg, m.delta)
        row, col = row + drow, col + dcol
        if m.kind == ElementKind.DESCEND_AND_CLOSE and m.gripper >= 0.5:
            break
    blocks = place_blocks(cfg, (row, col), rng)

    idle = Movement(delta=(0.0,) * cfg.dof, gripper=movements[-1].gripper, kind=ElementKind.OPEN_AND_DROP)
    movements = (movements + [idle] * max(0, T - 1 - len(movements)))[:T - 1]

    state = SceneState(blocks=blocks, marker=world_to_pixel(cfg, start[0], start[1]),
                       position=np.asarray(start, dtype=np.float64))
    frames, states, stages = simulate_episode(cfg, state, movements, rng)
    return Trajectory(
        frames=frames,
        actions=movements_to_actions(movements, dof=cfg.dof),
        states=states,
        stage_labels=stages,
        meta=TrajectoryMeta(source="synthetic", camera=0, robot="synthetic"),
    )


def generate_synthetic(
    seed: int,
    n_traj: int,
    T: int,
    scene_cfg: Union[SceneConfig, Dict[str, Any], None] = None,
) -> List[Trajectory]:
    """
    Seeded desk-scale grasp episodes.

    Args:
        seed: Master seed; each trajectory gets a spawned child stream
        n_traj: Number of trajectories (>= 1)
        T: Frames per trajectory (>= 2)
        scene_cfg: SceneConfig or mapping

    Returns:
        List of validated Trajectories

    Raises:
        ConfigError: If counts or the scene configuration are invalid
    """
    cfg = validate_section(SceneConfig, scene_cfg, "scene")
    if n_traj < 1:
        raise ConfigError("n_traj must be at least 1", key="n_traj")
    if T < 2:
        raise ConfigError("T must be at least 2", key="frames")
    children = np.random.SeedSequence(seed).spawn(n_traj)
    trajectories = [
        _synthetic_episode(cfg, T, np.random.default_rng(child)).validate((cfg.height, cfg.width))
        for child in children
    ]
    log.info("generated %d synthetic trajectories (seed=%d, T=%d)", n_traj, seed, T)
    return trajectories
