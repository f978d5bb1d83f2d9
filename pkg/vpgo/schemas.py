"""Pydantic schemas for actions, configuration, reports and API payloads."""
import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Vector3 = Tuple[float, float, float]

# Spatial downsampling from frame to feature grid for each encoder variant.
ENCODER_DOWNSAMPLE = {
    "vgg16_conv3_3": 16,
    "vgg16_conv4_3": 16,
    "vgg19_conv4_4": 16,
    "micro": 4,
}


class ElementKind(str, Enum):
    APPROACH_TOP = "ApproachTop"
    DESCEND_AND_CLOSE = "DescendAndClose"
    LIFT = "Lift"
    TRANSPORT = "Transport"
    OPEN_AND_DROP = "OpenAndDrop"


class GripperCommand(str, Enum):
    OPEN = "Open"
    CLOSE = "Close"
    HOLD = "Hold"


class Stage(str, Enum):
    """Semantic stage of a frame inside a grasp episode."""
    APPROACHING = "Approaching"
    GRASPING = "Grasping"
    MOVING = "Moving"
    NONE = "None"


def _all_finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


# ----- Action hierarchy -----

class SemanticGrasp(BaseModel):
    """Grasp an object at `grasp_point` and drop it over `drop_point`."""
    model_config = ConfigDict(frozen=True)

    grasp_point: Vector3
    drop_point: Vector3
    top_height: float

    @model_validator(mode='after')
    def validate_geometry(self):
        """Reject non-finite coordinates and a hover plane below the points."""
        if not _all_finite((*self.grasp_point, *self.drop_point, self.top_height)):
            raise ValueError("grasp_point, drop_point and top_height must be finite")
        if self.top_height <= self.grasp_point[2]:
            raise ValueError("top_height must be above grasp_point z")
        if self.top_height <= self.drop_point[2]:
            raise ValueError("top_height must be above drop_point z")
        return self


class ElementAction(BaseModel):
    """One of the five phases of a semantic grasp."""
    model_config = ConfigDict(frozen=True)

    kind: ElementKind
    start: Vector3
    end: Vector3
    gripper_command: GripperCommand


class Movement(BaseModel):
    """Elementary end-effector displacement plus gripper channel."""
    model_config = ConfigDict(frozen=True)

    delta: Tuple[float, ...]
    gripper: float = Field(ge=0.0, le=1.0)
    kind: ElementKind

    @field_validator('delta')
    @classmethod
    def validate_delta(cls, v):
        if not _all_finite(v):
            raise ValueError("delta must be finite")
        return v


# ----- Configuration -----

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class ModelConfig(_Section):
    """Architecture of the prediction, posterior and prior networks."""
    encoder_variant: Literal["vgg16_conv3_3", "vgg16_conv4_3", "vgg19_conv4_4", "micro"] = "vgg19_conv4_4"
    frame_size: Tuple[int, int] = (48, 64)
    feature_channels: int = Field(default=512, ge=1)
    action_code_channels: int = Field(default=2, ge=1)
    latent_channels: int = Field(default=16, ge=1)
    lstm_hidden: int = Field(default=512, ge=1)
    lstm_kernel: int = Field(default=3, ge=1)
    predictor_lstm_layers: int = Field(default=2, ge=1)
    prior_lstm_layers: int = Field(default=1, ge=1)
    posterior_lstm_layers: int = Field(default=1, ge=1)
    use_state: bool = False
    n_a: int = Field(default=4, ge=1)
    n_s: int = Field(default=3, ge=1)
    laplace_scale: float = Field(default=1.0, gt=0.0)
    channel_scale: float = Field(default=1.0, gt=0.0)
    pretrained_encoder: bool = False

    @model_validator(mode='after')
    def validate_shapes(self):
        """Frame size must divide evenly onto the feature grid."""
        factor = ENCODER_DOWNSAMPLE[self.encoder_variant]
        height, width = self.frame_size
        if height % factor or width % factor or height < factor or width < factor:
            raise ValueError(
                f"frame_size {self.frame_size} must be a positive multiple of {factor} "
                f"for encoder_variant {self.encoder_variant}"
            )
        if self.lstm_kernel % 2 == 0:
            raise ValueError("lstm_kernel must be odd")
        if self.pretrained_encoder and (self.channel_scale != 1.0 or self.encoder_variant == "micro"):
            raise ValueError("pretrained_encoder requires channel_scale 1.0 and a VGG variant")
        return self

    @property
    def feature_hw(self) -> Tuple[int, int]:
        factor = ENCODER_DOWNSAMPLE[self.encoder_variant]
        return self.frame_size[0] // factor, self.frame_size[1] // factor

    @property
    def action_input_dim(self) -> int:
        return self.n_a + (self.n_s if self.use_state else 0)


class TrainConfig(_Section):
    """Optimisation settings of the ELBO training loop."""
    c: int = Field(default=2, ge=1)
    horizon: int = Field(default=10, ge=1)
    beta: float = Field(default=1e-4, ge=0.0)
    beta_warmup_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    lr: float = Field(default=1e-4, gt=0.0)
    batch_size: int = Field(default=16, ge=1)
    steps: int = Field(default=1000, ge=0)
    seed: int = 0
    grad_clip: Optional[float] = Field(default=None, gt=0.0)
    log_every: int = Field(default=50, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)


class SceneConfig(_Section):
    """Synthetic top-down grasping scene."""
    height: int = Field(default=48, ge=8)
    width: int = Field(default=64, ge=8)
    pixels_per_meter: float = Field(default=100.0, gt=0.0)
    n_blocks: int = Field(default=3, ge=1)
    block_size_px: int = Field(default=6, ge=1)
    block_z: float = 0.02
    top_height: float = 0.25
    max_step: float = Field(default=0.05, gt=0.0)
    grasp_success_prob: float = Field(default=0.8, ge=0.0, le=1.0)
    dof: int = Field(default=3, ge=3)
    max_approach: float = Field(default=0.08, ge=0.0)
    min_transport: float = Field(default=0.06, ge=0.0)
    max_transport: float = Field(default=0.15, ge=0.0)

    @model_validator(mode='after')
    def validate_scene(self):
        """Blocks must fit the floor and sit below the hover plane."""
        if self.top_height <= self.block_z:
            raise ValueError("top_height must be above block_z")
        if self.min_transport > self.max_transport:
            raise ValueError("min_transport must not exceed max_transport")
        if 2 * self.block_size_px >= min(self.height, self.width):
            raise ValueError("block_size_px too large for the image")
        return self

    @property
    def half_extent(self) -> Tuple[float, float]:
        """Half width/height of the visible floor in meters (x, y)."""
        return self.width / (2 * self.pixels_per_meter), self.height / (2 * self.pixels_per_meter)


class ProtocolConfig(_Section):
    """Sampling-and-scoring protocol."""
    c: int = Field(default=2, ge=1)
    horizon: int = Field(default=10, ge=1)
    n_samples: int = Field(default=100, ge=1)
    fvd_batch: int = Field(default=256, ge=1)
    seed: int = 0
    lpips_extractor: Literal["random_projection", "lpips_alex"] = "random_projection"
    video_extractor: Literal["random_projection", "r3d_18"] = "random_projection"
    extractor_seed: int = 0
    extractor_weights: Optional[str] = None


class RunConfig(_Section):
    """Top-level YAML document."""
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)


# ----- Evaluation reports -----

METRIC_NAMES = ("psnr", "ssim", "lpips")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "lpips": False}


class Stat(BaseModel):
    mean: float
    stderr: float = Field(default=0.0, ge=0.0)


class ScoreSummary(BaseModel):
    best: Stat
    average: Stat


class ExampleScores(BaseModel):
    """Best-of-N and average-of-N scores of one test example."""
    index: int
    best: Dict[str, float]
    average: Dict[str, float]


class StageRow(BaseModel):
    stage: str
    empty: bool = False
    n_frames: int = 0
    metrics: Dict[str, ScoreSummary] = Field(default_factory=dict)


class MetricReport(BaseModel):
    """Aggregated scores of one evaluation run."""
    schema_version: int = 1
    protocol: ProtocolConfig
    n_examples: int
    metrics: Dict[str, ScoreSummary]
    # None when the test set has fewer than two examples.
    fvd: Optional[Stat] = None
    per_timestep: Dict[str, List[float]] = Field(default_factory=dict)
    examples: List[ExampleScores] = Field(default_factory=list)
    stages: List[StageRow] = Field(default_factory=list)
    # Tables conventionally print SSIM x100; stored values stay in [-1, 1].
    ssim_display_scale: float = 100.0

    @model_validator(mode='after')
    def check_ordering(self):
        """Best must not be worse than average, for every example."""
        tol = 1e-9
        for ex in self.examples:
            for name, higher in HIGHER_IS_BETTER.items():
                if name not in ex.best:
                    continue
                gap = ex.best[name] - ex.average[name]
                if (higher and gap < -tol) or (not higher and gap > tol):
                    raise ValueError(f"best/average ordering violated for {name} in example {ex.index}")
        return self


# ----- Runs -----

class RunManifest(BaseModel):
    """Everything needed to reproduce one CLI invocation."""
    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    version: str
    torch_version: str
    outputs: Dict[str, str] = Field(default_factory=dict)
    created_at: datetime


# ----- API payloads -----

class DecomposeRequest(BaseModel):
    grasp: SemanticGrasp
    max_step: float = Field(default=0.05, gt=0.0)
    start: Optional[Vector3] = None


class DecomposeResponse(BaseModel):
    elements: List[ElementAction]
    movements: List[Movement]
    net_displacement: List[float]


class RunRead(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    command: str
    seed: Optional[int]
    status: str
    out_dir: Optional[str]
    created_at: datetime
    finished_at: Optional[datetime]
    error: Optional[str]


class MetricRecordRead(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    run_id: int
    checkpoint: Optional[str]
    fvd: Optional[float]
    psnr_best: float
    psnr_average: float
    ssim_best: float
    ssim_average: float
    lpips_best: float
    lpips_average: float
