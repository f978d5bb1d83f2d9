"""Single-file checkpoints: parameters, config, optimizer and RNG states."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from vpgo.config import validate_section
from vpgo.errors import CheckpointError, ConfigError
from vpgo.model import VPGOModel, build_model
from vpgo.schemas import ModelConfig, TrainConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state_dict: Dict[str, torch.Tensor]
    step: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    torch_rng_state: Optional[torch.Tensor] = None
    sampler_state: Optional[Dict[str, Any]] = None
    train_config: Optional[TrainConfig] = None
    path: Optional[Path] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def build(self) -> VPGOModel:
        """Fresh model holding the checkpoint's parameters."""
        model = build_model(self.model_config)
        model.load_state_dict(self.state_dict)
        return model


def parameter_checksum(state_dict: Dict[str, torch.Tensor]) -> float:
    """Order-independent float64 sum of all parameters, for donor comparisons."""
    return float(sum(t.double().sum().item() for t in state_dict.values()))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "state_dict": {k: v.detach().cpu() for k, v in ckpt.state_dict.items()},
        "optimizer_state": ckpt.optimizer_state,
        "step": ckpt.step,
        "torch_rng_state": ckpt.torch_rng_state,
        "sampler_state": ckpt.sampler_state,
        "train_config": None if ckpt.train_config is None else ckpt.train_config.model_dump(mode="json"),
        "extra": ckpt.extra,
    }, path)
    log.info("saved checkpoint step=%d to %s", ckpt.step, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: If the file is missing or unreadable
        ConfigError: If the format version or stored config is invalid
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        raw = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(raw, dict) or raw.get("format_version") != CHECKPOINT_VERSION:
        version = raw.get("format_version") if isinstance(raw, dict) else None
        raise ConfigError(f"unsupported checkpoint format {version!r}, expected {CHECKPOINT_VERSION}",
                          key="format_version")
    train_cfg = raw.get("train_config")
    return Checkpoint(
        model_config=validate_section(ModelConfig, raw["model_config"], "model"),
        state_dict=raw["state_dict"],
        step=int(raw.get("step", 0)),
        optimizer_state=raw.get("optimizer_state"),
        torch_rng_state=raw.get("torch_rng_state"),
        sampler_state=raw.get("sampler_state"),
        train_config=None if train_cfg is None else validate_section(TrainConfig, train_cfg, "train"),
        path=path,
        extra=raw.get("extra") or {},
    )
