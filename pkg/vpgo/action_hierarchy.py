# vpgo/action_hierarchy.py
"""Semantic grasp -> element actions -> elementary end-effector movements."""
import logging
import math
from typing import List, Optional, Sequence

import numpy as np

from vpgo.schemas import (
    ElementAction,
    ElementKind,
    GripperCommand,
    Movement,
    SemanticGrasp,
    Stage,
    Vector3,
)

log = logging.getLogger(__name__)

PHASE_ORDER = (
    ElementKind.APPROACH_TOP,
    ElementKind.DESCEND_AND_CLOSE,
    ElementKind.LIFT,
    ElementKind.TRANSPORT,
    ElementKind.OPEN_AND_DROP,
)

GRIPPER_OPEN = 0.0
GRIPPER_CLOSED = 1.0

_STAGE_BY_KIND = {
    ElementKind.APPROACH_TOP: Stage.APPROACHING,
    ElementKind.DESCEND_AND_CLOSE: Stage.GRASPING,
    ElementKind.LIFT: Stage.GRASPING,
    ElementKind.TRANSPORT: Stage.MOVING,
    ElementKind.OPEN_AND_DROP: Stage.MOVING,
}


def stage_of(kind: ElementKind) -> Stage:
    return _STAGE_BY_KIND[kind]


def decompose_semantic(grasp: SemanticGrasp, start: Optional[Vector3] = None) -> List[ElementAction]:
    """
    Split a semantic grasp into its five element actions.

    Args:
        grasp: Validated semantic grasp
        start: Current end-effector position at the hover plane; defaults to
            the point directly above the grasp point

    Returns:
        Five chained ElementActions in phase order

    Raises:
        ValueError: If `start` is non-finite or below the hover plane
    """
    gx, gy, gz = grasp.grasp_point
    dx, dy, _ = grasp.drop_point
    top = grasp.top_height
    above_grasp = (gx, gy, top)
    above_drop = (dx, dy, top)

    if start is None:
        start = above_grasp
    start = tuple(float(v) for v in start)
    if len(start) != 3 or not all(math.isfinite(v) for v in start):
        raise ValueError("start must be a finite 3-vector")
    if start[2] < top:
        raise ValueError(f"start height {start[2]} is below the hover plane at {top}")

    elements = [
        ElementAction(kind=ElementKind.APPROACH_TOP, start=start, end=above_grasp,
                      gripper_command=GripperCommand.HOLD),
        ElementAction(kind=ElementKind.DESCEND_AND_CLOSE, start=above_grasp, end=(gx, gy, gz),
                      gripper_command=GripperCommand.CLOSE),
        ElementAction(kind=ElementKind.LIFT, start=(gx, gy, gz), end=above_grasp,
                      gripper_command=GripperCommand.HOLD),
        ElementAction(kind=ElementKind.TRANSPORT, start=above_grasp, end=above_drop,
                      gripper_command=GripperCommand.HOLD),
        ElementAction(kind=ElementKind.OPEN_AND_DROP, start=above_drop, end=above_drop,
                      gripper_command=GripperCommand.OPEN),
    ]
    log.debug("decompose_semantic(%s) -> %d elements", grasp, len(elements))
    return elements


def discretize_element(
    e: ElementAction,
    max_step: float,
    gripper_state: float = GRIPPER_OPEN,
    dof: int = 3,
) -> List[Movement]:
    """
    Cut an element action into equal displacement steps.

    The last step is the exact residual so the steps sum to `e.end - e.start`.
    Zero-length elements still emit one zero movement so the gripper command
    is never dropped.

    Args:
        e: Element action
        max_step: Maximum step norm in meters
        gripper_state: Gripper value carried by movements before the command
        dof: Number of displacement degrees of freedom (>= 3); extra rotation
            DOFs get zero deltas

    Returns:
        List of movements

    Raises:
        ValueError: If max_step is not positive or dof < 3
    """
    if not max_step > 0 or not math.isfinite(max_step):
        log.error("Invalid max_step for discretize_element: %s", max_step)
        raise ValueError("max_step must be a positive finite number")
    if dof < 3:
        raise ValueError("dof must be at least 3")

    displacement = np.asarray(e.end, dtype=np.float64) - np.asarray(e.start, dtype=np.float64)
    length = float(np.linalg.norm(displacement))
    n_steps = max(1, math.ceil(length / max_step - 1e-9))
    step = displacement / n_steps

    if e.gripper_command == GripperCommand.CLOSE:
        final_gripper = GRIPPER_CLOSED
    elif e.gripper_command == GripperCommand.OPEN:
        final_gripper = GRIPPER_OPEN
    else:
        final_gripper = gripper_state

    pad = (0.0,) * (dof - 3)
    movements = []
    accumulated = np.zeros(3)
    for i in range(n_steps):
        last = i == n_steps - 1
        delta = displacement - accumulated if last else step
        accumulated = accumulated + delta
        movements.append(Movement(
            delta=tuple(float(v) for v in delta) + pad,
            gripper=final_gripper if last else gripper_state,
            kind=e.kind,
        ))
    log.debug("discretize_element(%s, %s) -> %d movements", e.kind.value, max_step, len(movements))
    return movements


def net_displacement(ms: Sequence[Movement], dof: int = 3) -> np.ndarray:
    """Componentwise sum of movement deltas."""
    total = np.zeros(dof, dtype=np.float64)
    for m in ms:
        total[:len(m.delta)] += np.asarray(m.delta[:dof], dtype=np.float64)
    return total


def decompose_to_movements(
    grasp: SemanticGrasp,
    max_step: float,
    start: Optional[Vector3] = None,
    dof: int = 3,
) -> List[Movement]:
    """Full semantic grasp as one movement list, threading the gripper state."""
    gripper = GRIPPER_OPEN
    movements: List[Movement] = []
    for element in decompose_semantic(grasp, start=start):
        chunk = discretize_element(element, max_step, gripper_state=gripper, dof=dof)
        gripper = chunk[-1].gripper
        movements.extend(chunk)
    return movements


def movements_to_actions(ms: Sequence[Movement], dof: int = 3) -> np.ndarray:
    """Stack movements into the model's (N, dof + 1) action layout."""
    out = np.zeros((len(ms), dof + 1), dtype=np.float32)
    for i, m in enumerate(ms):
        out[i, :dof] = m.delta[:dof]
        out[i, dof] = m.gripper
    return out


def gripper_events(ms: Sequence[Movement], initial: float = GRIPPER_OPEN) -> List[str]:
    """List of "close"/"open" transitions in the gripper channel."""
    events = []
    state = initial
    for m in ms:
        if m.gripper != state:
            events.append("close" if m.gripper > state else "open")
            state = m.gripper
    return events
