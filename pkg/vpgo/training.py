"""ELBO objective, teacher-forced training step and the fit loop."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from vpgo.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from vpgo.config import validate_section
from vpgo.data import Batch, Trajectory, TrainingWindow, WindowSampler, collate
from vpgo.errors import ConfigError, EmptyDatasetError, ShapeError, TrainingDivergedError
from vpgo.metrics import psnr
from vpgo.model import GaussianParams, VPGOModel, teacher_forced
from vpgo.schemas import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class LossReport:
    """Loss terms as tensors; `total` carries the graph during training."""
    recon_l1: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor
    beta: float
    per_timestep_recon: torch.Tensor
    per_timestep_kl: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        return {
            "recon_l1": float(self.recon_l1.detach()),
            "kl": float(self.kl.detach()),
            "total": float(self.total.detach()),
            "beta": float(self.beta),
        }


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)


def kl_diag_gaussian(mu_q: torch.Tensor, sigma_q: torch.Tensor,
                     mu_p: torch.Tensor, sigma_p: torch.Tensor) -> torch.Tensor:
    """
    KL(q || p) between diagonal Gaussians, summed over all elements.

    Raises:
        ValueError: If any sigma is not strictly positive
    """
    if bool((sigma_q <= 0).any()) or bool((sigma_p <= 0).any()):
        raise ValueError("sigmas must be strictly positive")
    kl = (torch.log(sigma_p / sigma_q)
          + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sigma_p ** 2)
          - 0.5)
    return kl.sum()


def elbo_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    posterior: Sequence[GaussianParams],
    prior: Sequence[GaussianParams],
    beta: float,
    laplace_scale: float = 1.0,
) -> LossReport:
    """
    Negative variational bound with an l1 reconstruction term.

    Args:
        pred: (B, L, 3, H, W) predicted frames
        target: (B, L, 3, H, W) ground truth
        posterior: L posterior distributions
        prior: L prior distributions
        beta: KL weight
        laplace_scale: Fixed Laplace scale of the likelihood

    Returns:
        LossReport with recon = mean |pred - target| / scale and
        kl = sum over timesteps of the batch-mean KL

    Raises:
        ShapeError: If sequence lengths or shapes are misaligned
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    L = pred.shape[1]
    if len(posterior) != L or len(prior) != L:
        raise ShapeError(f"{L} frames need {L} posterior and prior steps, "
                         f"got {len(posterior)} and {len(prior)}")
    B = pred.shape[0]
    abs_err = (pred - target).abs() / laplace_scale
    per_t_recon = abs_err.flatten(2).mean(dim=2).mean(dim=0)
    per_t_kl = torch.stack([
        kl_diag_gaussian(q.mu, q.sigma, p.mu, p.sigma) / B for q, p in zip(posterior, prior)
    ])
    recon = abs_err.mean()
    kl = per_t_kl.sum()
    return LossReport(
        recon_l1=recon,
        kl=kl,
        total=recon + beta * kl,
        beta=float(beta),
        per_timestep_recon=per_t_recon.detach(),
        per_timestep_kl=per_t_kl.detach(),
    )


def beta_at(cfg: TrainConfig, step: int) -> float:
    """KL weight at `step`: linear ramp over the warm-up fraction of training."""
    warmup = cfg.beta_warmup_fraction * cfg.steps
    if warmup <= 0:
        return cfg.beta
    return cfg.beta * min(1.0, (step + 1) / warmup)


def make_train_state(model: VPGOModel, cfg: TrainConfig) -> TrainState:
    return TrainState(
        optimizer=torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=0.0),
        generator=torch.Generator().manual_seed(cfg.seed),
    )


def _noise_fn(state: TrainState, model: VPGOModel):
    return lambda shape: torch.randn(shape, generator=state.generator, dtype=model.dtype).to(model.device)


def train_step(model: VPGOModel, batch: Batch, cfg: TrainConfig, state: TrainState):
    """
    One teacher-forced update of all three networks.

    Args:
        model: VPGOModel
        batch: Windows of c + horizon frames
        cfg: TrainConfig
        state: Optimizer, noise generator and step counter (mutated)

    Returns:
        (LossReport, state)

    Raises:
        TrainingDivergedError: If the loss is not finite
    """
    model.train()
    batch = batch.to(model.device, model.dtype)
    out = teacher_forced(
        model, batch.frames, batch.actions,
        batch.states if model.cfg.use_state else None,
        noise_fn=_noise_fn(state, model),
    )
    c = cfg.c
    report = elbo_loss(
        out.predictions[:, c - 1:],
        batch.frames[:, c:],
        out.posterior[c - 1:],
        out.prior[c - 1:],
        beta_at(cfg, state.step),
        laplace_scale=model.cfg.laplace_scale,
    )
    values = report.to_dict()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: recon={values['recon_l1']} "
            f"kl={values['kl']} total={values['total']}"
        )

    state.optimizer.zero_grad()
    report.total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.history.append({"step": state.step, **values})
    return report, state


def _as_checkpoint(value: Union[Checkpoint, str, Path, None]) -> Optional[Checkpoint]:
    if value is None or isinstance(value, Checkpoint):
        return value
    return load_checkpoint(value)


def _snapshot(model: VPGOModel, cfg: TrainConfig, state: TrainState, sampler: Optional[WindowSampler]) -> Checkpoint:
    return Checkpoint(
        model_config=model.cfg,
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        step=state.step,
        optimizer_state=state.optimizer.state_dict(),
        torch_rng_state=state.generator.get_state(),
        sampler_state=None if sampler is None else sampler.get_state(),
        train_config=cfg,
        extra={"history": list(state.history)},
    )


def fit(
    model: VPGOModel,
    dataset: Sequence[Trajectory],
    cfg: Union[TrainConfig, Dict[str, Any], None] = None,
    out_dir: Union[str, Path, None] = None,
    init_checkpoint: Union[Checkpoint, str, Path, None] = None,
    resume: Union[Checkpoint, str, Path, None] = None,
) -> Checkpoint:
    """
    Train for cfg.steps steps (counting steps already done when resuming).

    Args:
        model: VPGOModel (mutated)
        dataset: Training trajectories
        cfg: TrainConfig or mapping
        out_dir: Where periodic and final checkpoints go; None keeps them in memory
        init_checkpoint: Donor checkpoint whose parameters start fine-tuning
        resume: Checkpoint to continue from, optimizer and RNG states included

    Returns:
        Final Checkpoint (saved as out_dir/final.pt when out_dir is given)

    Raises:
        EmptyDatasetError: If `dataset` is empty or too short for a window
        ConfigError: If a checkpoint was built for another model config
    """
    cfg = validate_section(TrainConfig, cfg, "train")
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None

    state = make_train_state(model, cfg)
    sampler = WindowSampler(dataset, cfg.c, cfg.horizon, seed=cfg.seed)

    donor = _as_checkpoint(init_checkpoint)
    if donor is not None:
        if donor.model_config != model.cfg:
            raise ConfigError("init checkpoint was trained with a different model config", key="model")
        model.load_state_dict(donor.state_dict)
        log.info("fine-tuning from donor checkpoint at step %d", donor.step)

    previous = _as_checkpoint(resume)
    if previous is not None:
        if previous.model_config != model.cfg:
            raise ConfigError("resume checkpoint was trained with a different model config", key="model")
        model.load_state_dict(previous.state_dict)
        if previous.optimizer_state is not None:
            state.optimizer.load_state_dict(previous.optimizer_state)
        if previous.torch_rng_state is not None:
            state.generator.set_state(previous.torch_rng_state)
        if previous.sampler_state is not None:
            sampler.set_state(previous.sampler_state)
        state.step = previous.step
        state.history = list(previous.extra.get("history", []))
        log.info("resuming from step %d", previous.step)

    while state.step < cfg.steps:
        report, state = train_step(model, sampler.batch(cfg.batch_size), cfg, state)
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            values = report.to_dict()
            log.info("step %d/%d total=%.5f recon=%.5f kl=%.3f beta=%.2e", state.step, cfg.steps,
                     values["total"], values["recon_l1"], values["kl"], values["beta"])
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(_snapshot(model, cfg, state, sampler), out_dir / f"step_{state.step:06d}.pt")

    final = _snapshot(model, cfg, state, sampler)
    if out_dir is not None:
        final.path = save_checkpoint(final, out_dir / "final.pt")
    return final


def _windows_batch(windows: Union[Batch, Sequence[TrainingWindow]]) -> Batch:
    if isinstance(windows, Batch):
        return windows
    if not windows:
        raise EmptyDatasetError("no windows to score")
    return collate(windows)


@torch.no_grad()
def reconstruction_psnr(model: VPGOModel, windows: Union[Batch, Sequence[TrainingWindow]], c: int = 2) -> float:
    """Mean teacher-forced PSNR of frames c.. using posterior means."""
    model.eval()
    batch = _windows_batch(windows).to(model.device, model.dtype)
    out = teacher_forced(
        model, batch.frames, batch.actions,
        batch.states if model.cfg.use_state else None,
        noise_fn=lambda shape: torch.zeros(shape, dtype=model.dtype, device=model.device),
    )
    pred = out.predictions[:, c - 1:].float().cpu().numpy()
    target = batch.frames[:, c:].float().cpu().numpy()
    scores = [psnr(p, t) for p, t in zip(pred.reshape(-1, *pred.shape[2:]), target.reshape(-1, *target.shape[2:]))]
    return float(np.mean(scores))
