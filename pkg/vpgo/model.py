"""Prediction, posterior and prior networks with latent sampling and rollout."""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torchvision.models.vgg import cfgs, make_layers

from vpgo.config import validate_section
from vpgo.errors import MissingTargetsError, RecurrentStateError, ShapeError
from vpgo.schemas import ModelConfig

log = logging.getLogger(__name__)

# torchvision layer config and truncation index per encoder variant
VGG_LAYERS = {
    "vgg16_conv3_3": ("D", 9),
    "vgg16_conv4_3": ("D", 13),
    "vgg19_conv4_4": ("E", 15),
}
MICRO_LAYERS = [16, "M", 16, "M"]

LOGVAR_CLAMP = 20.0

Tensor = torch.Tensor
LSTMState = List[Tuple[Tensor, Tensor]]
NoiseFn = Callable[[Tuple[int, ...]], Tensor]


def _layer_cfg(cfg: ModelConfig) -> List[Union[int, str]]:
    if cfg.encoder_variant == "micro":
        layers = list(MICRO_LAYERS)
    else:
        name, stop = VGG_LAYERS[cfg.encoder_variant]
        layers = list(cfgs[name][:stop])
    return [v if v == "M" else max(1, int(round(v * cfg.channel_scale))) for v in layers]


# ----- Building blocks -----

class ConvLSTMCell(nn.Module):
    """Conv-LSTM cell; one convolution produces all four gates."""

    def __init__(self, input_size: int, hidden_size: int, kernel_size: int = 3):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.gates = nn.Conv2d(input_size + hidden_size, 4 * hidden_size, kernel_size,
                               padding=kernel_size // 2)

    def forward(self, x: Tensor, prev_state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        prev_hidden, prev_cell = prev_state
        gates = self.gates(torch.cat((x, prev_hidden), dim=1))
        in_gate, remember_gate, out_gate, cell_gate = gates.chunk(4, dim=1)
        cell = torch.sigmoid(remember_gate) * prev_cell + torch.sigmoid(in_gate) * torch.tanh(cell_gate)
        hidden = torch.sigmoid(out_gate) * torch.tanh(cell)
        return hidden, cell


class ConvLSTM(nn.Module):
    """Stack of conv-LSTM cells; returns the top hidden map."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_size = hidden_size
        self.cells = nn.ModuleList(
            ConvLSTMCell(input_size if i == 0 else hidden_size, hidden_size, kernel_size)
            for i in range(num_layers)
        )

    def init_state(self, batch_size: int, hw: Tuple[int, int], like: Tensor) -> LSTMState:
        shape = (batch_size, self.hidden_size, *hw)
        return [(like.new_zeros(shape), like.new_zeros(shape)) for _ in self.cells]

    def forward(self, x: Tensor, state: LSTMState) -> Tuple[Tensor, LSTMState]:
        new_state = []
        for cell, layer_state in zip(self.cells, state):
            x, c = cell(x, layer_state)
            new_state.append((x, c))
        return x, new_state


class FrameEncoder(nn.Module):
    """VGG convolutions truncated at the variant's layer, pooled onto the feature grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = _layer_cfg(cfg)
        self.features = make_layers(layers, batch_norm=False)
        out_channels = [v for v in layers if v != "M"][-1]
        self.proj = (
            nn.Conv2d(out_channels, cfg.feature_channels, kernel_size=1)
            if out_channels != cfg.feature_channels else nn.Identity()
        )
        self.pool = nn.AdaptiveMaxPool2d(cfg.feature_hw)
        self.out_channels = out_channels
        n_pools = layers.count("M")
        self.pre_pool_hw = (cfg.frame_size[0] >> n_pools, cfg.frame_size[1] >> n_pools)
        self.normalize = cfg.pretrained_encoder
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.pool(self.proj(self.features(x)))


class FrameDecoder(nn.Module):
    """Mirror of the encoder; nearest upsampling where the encoder pools."""

    def __init__(self, cfg: ModelConfig, encoder: FrameEncoder, in_channels: int):
        super().__init__()
        layers: List[nn.Module] = [nn.Upsample(size=encoder.pre_pool_hw, mode="nearest")]
        if in_channels != encoder.out_channels:
            layers.append(nn.Conv2d(in_channels, encoder.out_channels, kernel_size=1))

        # (in, out) of each encoder conv, pools as None
        mirrored: List[Optional[Tuple[int, int]]] = []
        channels = 3
        for v in _layer_cfg(cfg):
            if v == "M":
                mirrored.append(None)
            else:
                mirrored.append((channels, v))
                channels = v
        for entry in reversed(mirrored):
            if entry is None:
                layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
                continue
            enc_in, enc_out = entry
            layers.append(nn.Conv2d(enc_out, enc_in, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True) if enc_in != 3 else nn.Sigmoid())
        self.layers = nn.Sequential(*layers)

    def forward(self, h: Tensor) -> Tensor:
        return self.layers(h)


class ActionEncoder(nn.Module):
    """Single dense layer from action (and state) to a small channel grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = (cfg.action_code_channels, *cfg.feature_hw)
        self.fc = nn.Linear(cfg.action_input_dim, int(np.prod(self.grid)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(x).view(x.shape[0], *self.grid)


class PredictionNetwork(nn.Module):
    """Frame encoder, action encoder, conv-LSTM trunk and decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = FrameEncoder(cfg)
        self.action_encoder = ActionEncoder(cfg)
        self.lstm = ConvLSTM(
            cfg.feature_channels + cfg.action_code_channels + cfg.latent_channels,
            cfg.lstm_hidden, cfg.predictor_lstm_layers, cfg.lstm_kernel,
        )
        self.decoder = FrameDecoder(cfg, self.encoder, cfg.lstm_hidden)


class GaussianNetwork(nn.Module):
    """Conv-LSTM over frame features and action codes with a dense Gaussian head."""

    def __init__(self, cfg: ModelConfig, num_layers: int):
        super().__init__()
        h, w = cfg.feature_hw
        self.latent_channels = cfg.latent_channels
        self.encoder = FrameEncoder(cfg)
        self.action_encoder = ActionEncoder(cfg)
        self.lstm = ConvLSTM(cfg.feature_channels + cfg.action_code_channels,
                             cfg.lstm_hidden, num_layers, cfg.lstm_kernel)
        self.head = nn.Linear(cfg.lstm_hidden * h * w, 2 * cfg.latent_channels * h * w)

    def forward(self, features: Tensor, action_code: Tensor, state: LSTMState) -> Tuple[Tensor, Tensor, LSTMState]:
        out, state = self.lstm(torch.cat((features, action_code), dim=1), state)
        params = self.head(out.flatten(1)).view(out.shape[0], 2 * self.latent_channels, *out.shape[2:])
        mu, logvar = params.chunk(2, dim=1)
        return mu, logvar, state


class VPGOModel(nn.Module):
    """The three disjoint networks: prediction (theta), posterior (phi), prior (psi)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.prediction = PredictionNetwork(cfg)
        self.posterior = GaussianNetwork(cfg, cfg.posterior_lstm_layers)
        self.prior = GaussianNetwork(cfg, cfg.prior_lstm_layers)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        return {
            "theta": list(self.prediction.parameters()),
            "phi": list(self.posterior.parameters()),
            "psi": list(self.prior.parameters()),
        }

    def network(self, name: str) -> nn.Module:
        if name not in ("prediction", "posterior", "prior"):
            raise ValueError(f"unknown network {name!r}")
        return getattr(self, name)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device


# ----- Latents and recurrent state -----

@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor


@dataclass
class LatentSample:
    mu: Tensor
    sigma: Tensor
    z: Tensor


@dataclass
class RecurrentState:
    """Per-layer (h, c) of each network; None until initialized."""
    prediction: Optional[LSTMState] = None
    prior: Optional[LSTMState] = None
    posterior: Optional[LSTMState] = None


def sigma_from_logvar(logvar: Tensor) -> Tensor:
    return torch.exp(0.5 * logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))


def sample_latent(mu: Tensor, sigma: Tensor, noise: Tensor) -> Tensor:
    """
    Reparameterized draw z = mu + sigma * noise.

    Raises:
        ShapeError: If the three tensors differ in shape
        ValueError: If any sigma is not strictly positive
    """
    if mu.shape != sigma.shape or mu.shape != noise.shape:
        raise ShapeError(f"mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)} and noise "
                         f"{tuple(noise.shape)} must match")
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be strictly positive")
    return mu + sigma * noise


# ----- Construction -----

def _load_pretrained(model: VPGOModel) -> None:  # pragma: no cover
    from torchvision.models import VGG16_Weights, VGG19_Weights, vgg16, vgg19

    if model.cfg.encoder_variant == "vgg19_conv4_4":
        source = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features.state_dict()
    else:
        source = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.state_dict()
    for net in (model.prediction, model.posterior, model.prior):
        own = net.encoder.features.state_dict()
        net.encoder.features.load_state_dict({k: source[k] for k in own})
    log.info("loaded ImageNet weights into the %s encoders", model.cfg.encoder_variant)


def build_model(cfg: Union[ModelConfig, dict, None] = None, seed: int = 0) -> VPGOModel:
    """
    Build the model with parameters initialized from `seed`.

    Args:
        cfg: ModelConfig or mapping; None for defaults
        seed: Initialization seed; the global torch RNG is left untouched

    Returns:
        VPGOModel

    Raises:
        ConfigError: If the configuration is invalid
    """
    cfg = validate_section(ModelConfig, cfg, "model")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VPGOModel(cfg)
    if cfg.pretrained_encoder:
        _load_pretrained(model)
    log.info("built %s model with %d parameters", cfg.encoder_variant, count_parameters(model))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_recurrent_state(model: VPGOModel, batch_size: int) -> RecurrentState:
    like = next(model.parameters())
    hw = model.cfg.feature_hw
    return RecurrentState(
        prediction=model.prediction.lstm.init_state(batch_size, hw, like),
        prior=model.prior.lstm.init_state(batch_size, hw, like),
        posterior=model.posterior.lstm.init_state(batch_size, hw, like),
    )


# ----- Step functions -----

def encode_frame(model: VPGOModel, frames: Tensor, network: str = "prediction") -> Tensor:
    """(B, 3, H, W) frames in [0, 1] -> (B, feature_channels, h, w) with `network`'s encoder."""
    cfg = model.cfg
    if frames.dim() != 4 or tuple(frames.shape[1:]) != (3, *cfg.frame_size):
        raise ShapeError(f"frames must be (B, 3, {cfg.frame_size[0]}, {cfg.frame_size[1]}), "
                         f"got {tuple(frames.shape)}")
    return model.network(network).encoder(frames)


def encode_action(
    model: VPGOModel,
    action: Tensor,
    state: Optional[Tensor] = None,
    network: str = "prediction",
) -> Tensor:
    """
    Encode a batch of actions (and robot states) into a (B, 2, h, w) code.

    Raises:
        ShapeError: If `state` disagrees with use_state or widths are wrong
    """
    cfg = model.cfg
    if action.dim() != 2 or action.shape[1] != cfg.n_a:
        raise ShapeError(f"action must be (B, {cfg.n_a}), got {tuple(action.shape)}")
    if cfg.use_state:
        if state is None:
            raise ShapeError("use_state is enabled but no state was given")
        if state.dim() != 2 or state.shape != (action.shape[0], cfg.n_s):
            raise ShapeError(f"state must be (B, {cfg.n_s}), got {tuple(state.shape)}")
        action = torch.cat((action, state), dim=1)
    elif state is not None:
        raise ShapeError("state given but use_state is disabled")
    return model.network(network).action_encoder(action)


def _require(state: RecurrentState, name: str) -> LSTMState:
    lstm_state = getattr(state, name) if state is not None else None
    if lstm_state is None:
        raise RecurrentStateError(f"{name} recurrent state is not initialized")
    return lstm_state


def _gaussian_step(model: VPGOModel, name: str, features: Tensor, action_code: Tensor,
                   state: RecurrentState) -> Tuple[GaussianParams, RecurrentState]:
    lstm_state = _require(state, name)
    mu, logvar, lstm_state = model.network(name)(features, action_code, lstm_state)
    return GaussianParams(mu=mu, sigma=sigma_from_logvar(logvar)), replace(state, **{name: lstm_state})


def prior_step(model: VPGOModel, prev_features: Tensor, action_code: Tensor,
               state: RecurrentState) -> Tuple[GaussianParams, RecurrentState]:
    """Learned prior from the previous frame; inputs must come from the prior's own encoders."""
    return _gaussian_step(model, "prior", prev_features, action_code, state)


def posterior_step(model: VPGOModel, current_features: Tensor, action_code: Tensor,
                   state: RecurrentState) -> Tuple[GaussianParams, RecurrentState]:
    """Approximate posterior from the current ground-truth frame."""
    return _gaussian_step(model, "posterior", current_features, action_code, state)


def predict_step(model: VPGOModel, prev_features: Tensor, action_code: Tensor, z: Tensor,
                 state: RecurrentState) -> Tuple[Tensor, RecurrentState]:
    """
    Decode the next frame.

    Args:
        model: VPGOModel
        prev_features: Prediction-encoder features of the previous frame
        action_code: Prediction action code
        z: Latent (B, latent_channels, h, w)
        state: Recurrent state

    Returns:
        (frame (B, 3, H, W) in [0, 1], updated state)
    """
    cfg = model.cfg
    lstm_state = _require(state, "prediction")
    expected = (prev_features.shape[0], cfg.latent_channels, *cfg.feature_hw)
    if tuple(z.shape) != expected:
        raise ShapeError(f"z must be {expected}, got {tuple(z.shape)}")
    x = torch.cat((prev_features, action_code, z), dim=1)
    hidden, lstm_state = model.prediction.lstm(x, lstm_state)
    return model.prediction.decoder(hidden), replace(state, prediction=lstm_state)


@dataclass
class StepOutput:
    frame: Tensor
    posterior: Optional[GaussianParams]
    prior: GaussianParams
    z: Tensor


def _step(
    model: VPGOModel,
    prev_frame: Tensor,
    action: Tensor,
    robot_state: Optional[Tensor],
    state: RecurrentState,
    noise: Tensor,
    target: Optional[Tensor] = None,
    use_posterior: bool = True,
) -> Tuple[StepOutput, RecurrentState]:
    """One transition x_{t-1}, a_{t-1} -> x_t; the posterior runs only when `target` is given."""
    prior, state = prior_step(
        model,
        encode_frame(model, prev_frame, "prior"),
        encode_action(model, action, robot_state, "prior"),
        state,
    )
    posterior = None
    if target is not None:
        posterior, state = posterior_step(
            model,
            encode_frame(model, target, "posterior"),
            encode_action(model, action, robot_state, "posterior"),
            state,
        )
    source = posterior if (use_posterior and posterior is not None) else prior
    z = sample_latent(source.mu, source.sigma, noise)
    frame, state = predict_step(
        model,
        encode_frame(model, prev_frame, "prediction"),
        encode_action(model, action, robot_state, "prediction"),
        z,
        state,
    )
    return StepOutput(frame=frame, posterior=posterior, prior=prior, z=z), state


@dataclass
class TeacherForcedOutput:
    """Predictions for t = 1..T-1 with the distributions that produced them."""
    predictions: Tensor
    posterior: List[GaussianParams]
    prior: List[GaussianParams]


def _check_sequence(model: VPGOModel, frames: Tensor, actions: Tensor, states: Optional[Tensor]) -> None:
    cfg = model.cfg
    if frames.dim() != 5 or tuple(frames.shape[2:]) != (3, *cfg.frame_size):
        raise ShapeError(f"frames must be (B, T, 3, {cfg.frame_size[0]}, {cfg.frame_size[1]}), "
                         f"got {tuple(frames.shape)}")
    B, T = frames.shape[:2]
    if tuple(actions.shape) != (B, T - 1, cfg.n_a):
        raise ShapeError(f"actions must be ({B}, {T - 1}, {cfg.n_a}), got {tuple(actions.shape)}")
    if cfg.use_state and states is None:
        raise ShapeError("use_state is enabled but no states were given")
    if states is not None and tuple(states.shape[:2]) != (B, T):
        raise ShapeError(f"states must be ({B}, {T}, n_s), got {tuple(states.shape)}")


def teacher_forced(
    model: VPGOModel,
    frames: Tensor,
    actions: Tensor,
    states: Optional[Tensor] = None,
    noise_fn: Optional[NoiseFn] = None,
) -> TeacherForcedOutput:
    """
    Run every transition of ground-truth sequences with posterior latents.

    Args:
        model: VPGOModel
        frames: (B, T, 3, H, W) in [0, 1]
        actions: (B, T-1, n_a)
        states: (B, T, n_s) when use_state is enabled
        noise_fn: Standard-normal noise for a given shape; torch.randn by default

    Returns:
        TeacherForcedOutput with predictions (B, T-1, 3, H, W)

    Raises:
        ShapeError: If shapes disagree or states are missing for a state-conditioned model
    """
    _check_sequence(model, frames, actions, states if model.cfg.use_state else None)
    noise_fn = noise_fn or (lambda shape: torch.randn(shape, dtype=frames.dtype, device=frames.device))
    use_state = model.cfg.use_state
    B, T = frames.shape[:2]
    latent_shape = (B, model.cfg.latent_channels, *model.cfg.feature_hw)

    state = init_recurrent_state(model, B)
    predictions, posteriors, priors = [], [], []
    for t in range(1, T):
        out, state = _step(
            model, frames[:, t - 1], actions[:, t - 1],
            states[:, t - 1] if use_state else None,
            state, noise_fn(latent_shape), target=frames[:, t],
        )
        predictions.append(out.frame)
        posteriors.append(out.posterior)
        priors.append(out.prior)
    return TeacherForcedOutput(predictions=torch.stack(predictions, dim=1), posterior=posteriors, prior=priors)


def sample_generator(seed: int, k: int) -> torch.Generator:
    """Noise stream of sample k; the same (seed, k) always gives the same stream."""
    child = int(np.random.SeedSequence([seed, k]).generate_state(1, dtype=np.uint64)[0])
    return torch.Generator().manual_seed(child)


def _as_channel_first(x: Union[np.ndarray, Tensor], model: VPGOModel) -> Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x)
    return t.to(device=model.device, dtype=model.dtype).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def rollout(
    model: VPGOModel,
    context: Union[np.ndarray, Tensor],
    actions: Union[np.ndarray, Tensor],
    states: Union[np.ndarray, Tensor, None] = None,
    mode: str = "prior",
    n_samples: int = 1,
    seed: int = 0,
    targets: Union[np.ndarray, Tensor, None] = None,
) -> np.ndarray:
    """
    Sample futures of one example.

    Context frames are consumed with posterior latents; predicted frames are
    fed back for every later step.

    Args:
        model: VPGOModel
        context: (c, H, W, 3) frames in [0, 1]
        actions: (c + horizon - 1, n_a)
        states: (c + horizon - 1, n_s) robot states when use_state is enabled
        mode: "prior" samples future latents from the learned prior,
            "posterior" infers them from `targets`
        n_samples: Independent latent draws; sample k uses stream (seed, k)
        seed: Rollout seed
        targets: (horizon, H, W, 3) ground truth, required in posterior mode

    Returns:
        float32 array (n_samples, horizon, H, W, 3)

    Raises:
        MissingTargetsError: If posterior mode is requested without targets
        ShapeError: If lengths disagree
    """
    if mode not in ("prior", "posterior"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "posterior" and targets is None:
        raise MissingTargetsError("posterior rollout needs ground-truth targets")
    cfg = model.cfg
    ctx = _as_channel_first(context, model)
    acts = torch.as_tensor(np.asarray(actions) if not isinstance(actions, Tensor) else actions)
    acts = acts.to(device=model.device, dtype=model.dtype)
    c = ctx.shape[0]
    horizon = acts.shape[0] - c + 1
    if c < 1 or horizon < 1:
        raise ShapeError(f"{acts.shape[0]} actions cannot follow {c} context frames")
    robot = None
    if cfg.use_state:
        if states is None:
            raise ShapeError("use_state is enabled but no states were given")
        robot = torch.as_tensor(np.asarray(states) if not isinstance(states, Tensor) else states)
        robot = robot.to(device=model.device, dtype=model.dtype)
        if robot.shape[0] < c + horizon - 1:
            raise ShapeError(f"need {c + horizon - 1} states, got {robot.shape[0]}")
    tgt = None
    if targets is not None:
        tgt = _as_channel_first(targets, model)
        if tgt.shape[0] != horizon:
            raise ShapeError(f"targets must have {horizon} frames, got {tgt.shape[0]}")

    latent_shape = (1, cfg.latent_channels, *cfg.feature_hw)
    samples = []
    for k in range(n_samples):
        gen = sample_generator(seed, k)
        state = init_recurrent_state(model, 1)
        prev = ctx[0:1]
        predicted = []
        for t in range(1, c + horizon):
            noise = torch.randn(latent_shape, generator=gen, dtype=model.dtype).to(model.device)
            if t < c:
                target = ctx[t:t + 1]
            elif mode == "posterior":
                target = tgt[t - c:t - c + 1]
            else:
                target = None
            out, state = _step(
                model, prev, acts[t - 1:t],
                robot[t - 1:t] if robot is not None else None,
                state, noise, target=target,
            )
            if t < c:
                prev = ctx[t:t + 1]
            else:
                prev = out.frame
                predicted.append(out.frame[0])
        samples.append(torch.stack(predicted))
    log.debug("rollout mode=%s c=%d horizon=%d n_samples=%d seed=%d", mode, c, horizon, n_samples, seed)
    return torch.stack(samples).permute(0, 1, 3, 4, 2).float().cpu().numpy()
