"""Action hierarchy inspection route."""
import logging

from fastapi import APIRouter, HTTPException, status

from vpgo import action_hierarchy, schemas

router = APIRouter(prefix="/actions", tags=["actions"])
log = logging.getLogger("vpgo.api")


@router.post("/decompose", response_model=schemas.DecomposeResponse)
def decompose(request: schemas.DecomposeRequest):
    """
    Decompose a semantic grasp into element actions and movements.

    - **grasp**: grasp_point, drop_point and top_height
    - **max_step**: Maximum movement norm in meters (default: 0.05)
    - **start**: Optional end-effector start; defaults to above the grasp point

    Raises:
        400: If the start point is invalid
    """
    try:
        elements = action_hierarchy.decompose_semantic(request.grasp, start=request.start)
        movements = action_hierarchy.decompose_to_movements(request.grasp, request.max_step, start=request.start)
    except ValueError as e:
        log.warning("decompose rejected: %s", e)
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    return schemas.DecomposeResponse(
        elements=elements,
        movements=movements,
        net_displacement=action_hierarchy.net_displacement(movements).tolist(),
    )
