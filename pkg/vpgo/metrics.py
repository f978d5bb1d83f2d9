"""PSNR, SSIM, LPIPS and FVD with pluggable feature extractors.

Images are channel-last arrays in [0, max_val]: a single image is (H, W, 3),
batches add leading axes. Video clips are (N, L, H, W, 3).
"""
import logging
from typing import Dict, List, Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from vpgo.errors import MetricInputError

log = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

LPIPS_EPS = 1e-10
EIGEN_TOL = 1e-8


def _to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise MetricInputError(f"inputs differ in shape: {x.shape} vs {y.shape}")


def _images_nchw(x: np.ndarray) -> torch.Tensor:
    """(..., H, W, C) -> float64 (N, C, H, W)."""
    if x.ndim < 3:
        raise MetricInputError(f"images must be (..., H, W, C), got {x.shape}")
    flat = x.reshape(-1, *x.shape[-3:])
    return torch.from_numpy(np.ascontiguousarray(flat)).permute(0, 3, 1, 2)


# ----- PSNR / SSIM -----

GAUSSIAN_TRUNCATE = 3.5


def ssim_window(sigma: float = 1.5) -> int:
    """Side of the Gaussian window structural_similarity uses for `sigma`."""
    return 2 * int(GAUSSIAN_TRUNCATE * sigma + 0.5) + 1


def _flat_images(x: np.ndarray) -> np.ndarray:
    if x.ndim < 3:
        raise MetricInputError(f"images must be (..., H, W, C), got {x.shape}")
    return x.reshape(-1, *x.shape[-3:])


def psnr(x: ArrayLike, y: ArrayLike, max_val: float = 1.0, cap: float = 100.0) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Args:
        x: Image or array of any shape
        y: Same shape as x
        max_val: Dynamic range
        cap: Value returned for identical inputs

    Returns:
        10 log10(max_val^2 / MSE), at most `cap`
    """
    x, y = _to_numpy(x), _to_numpy(y)
    _same_shape(x, y)
    with np.errstate(divide="ignore"):
        value = peak_signal_noise_ratio(x, y, data_range=max_val)
    return float(min(cap, value))


def psnr_batch(x: ArrayLike, y: ArrayLike, max_val: float = 1.0, cap: float = 100.0) -> np.ndarray:
    """Per-image PSNR over the trailing (H, W, C) axes."""
    x, y = _to_numpy(x), _to_numpy(y)
    _same_shape(x, y)
    lead = x.shape[:-3] if x.ndim >= 3 else ()
    scores = [psnr(a, b, max_val, cap) for a, b in zip(_flat_images(x), _flat_images(y))]
    return np.asarray(scores, dtype=np.float64).reshape(lead)


def ssim(x: ArrayLike, y: ArrayLike, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """
    Structural similarity of two images, in [-1, 1].

    Gaussian-weighted local statistics with population covariance, averaged
    over channels and the window positions that lie fully inside the image.

    Raises:
        MetricInputError: If shapes differ or the image is smaller than the window
    """
    return float(np.mean(ssim_batch(x, y, sigma, k1, k2, max_val)))


def ssim_batch(
    x: ArrayLike,
    y: ArrayLike,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    max_val: float = 1.0,
) -> np.ndarray:
    """Per-image SSIM over the trailing (H, W, C) axes."""
    x, y = _to_numpy(x), _to_numpy(y)
    _same_shape(x, y)
    window = ssim_window(sigma)
    if x.ndim < 3 or x.shape[-3] < window or x.shape[-2] < window:
        raise MetricInputError(f"images {x.shape} are smaller than the {window}x{window} window")
    scores = [
        structural_similarity(
            a, b, data_range=max_val, channel_axis=-1, gaussian_weights=True, sigma=sigma,
            use_sample_covariance=False, K1=k1, K2=k2,
        )
        for a, b in zip(_flat_images(x), _flat_images(y))
    ]
    return np.asarray(scores, dtype=np.float64).reshape(x.shape[:-3])


# ----- Perceptual features -----

class FeatureExtractor(Protocol):
    def __call__(self, images: torch.Tensor) -> List[torch.Tensor]:
        """(N, 3, H, W) float64 in [0, 1] -> list of (N, C_l, H_l, W_l) maps."""
        ...


class VideoFeatureExtractor(Protocol):
    def __call__(self, clips: torch.Tensor) -> torch.Tensor:
        """(N, L, H, W, 3) float64 in [0, 1] -> (N, D) features."""
        ...


def _seeded_conv(conv: nn.Module, gen: torch.Generator) -> nn.Module:
    with torch.no_grad():
        fan_in = conv.weight[0].numel()
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64) / np.sqrt(fan_in))
        if conv.bias is not None:
            conv.bias.zero_()
    conv.requires_grad_(False)
    return conv


class RandomProjectionExtractor:
    """
    Fixed random convolutions standing in for a pretrained perceptual network.

    Each layer is a 3x3 convolution (1x1 when `kernel_size=1`) followed by ReLU
    unless `linear`; layers after the first halve the resolution first.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32), kernel_size: int = 3,
                 linear: bool = False):
        gen = torch.Generator().manual_seed(seed)
        self.linear = linear
        self.layers = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, kernel_size, padding=kernel_size // 2).double()
            self.layers.append(_seeded_conv(conv, gen))
            c_in = c_out

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> List[torch.Tensor]:
        x = images.double()
        maps = []
        for i, conv in enumerate(self.layers):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = conv(x)
            if not self.linear:
                x = F.relu(x)
            maps.append(x)
        return maps


class LpipsNetExtractor:  # pragma: no cover
    """Adapter over the `lpips` package (AlexNet backbone, learned layer weights)."""

    def __init__(self, net: str = "alex"):
        import lpips

        self.model = lpips.LPIPS(net=net, verbose=False).double().eval()

    @torch.no_grad()
    def distance(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.model(x.double() * 2 - 1, y.double() * 2 - 1).flatten()

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> List[torch.Tensor]:
        return list(self.model.net.forward(self.model.scaling_layer(images.double() * 2 - 1)))


def _unit_channels(f: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((f ** 2).sum(dim=1, keepdim=True))
    return f / (norm + LPIPS_EPS)


def lpips_batch(x: ArrayLike, y: ArrayLike, fe: FeatureExtractor,
                layer_weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Per-image perceptual distance."""
    x, y = _to_numpy(x), _to_numpy(y)
    _same_shape(x, y)
    lead = x.shape[:-3]
    a, b = _images_nchw(x), _images_nchw(y)
    if hasattr(fe, "distance"):
        return fe.distance(a, b).numpy().reshape(lead)
    try:
        fa, fb = fe(a), fe(b)
    except RuntimeError as e:
        raise MetricInputError(f"feature extractor rejected images of shape {x.shape[-3:]}: {e}") from e
    weights = list(layer_weights) if layer_weights is not None else [1.0] * len(fa)
    if len(weights) != len(fa):
        raise MetricInputError(f"{len(weights)} layer weights for {len(fa)} feature layers")
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for w, la, lb in zip(weights, fa, fb):
        diff = (_unit_channels(la) - _unit_channels(lb)) ** 2
        total = total + w * diff.sum(dim=1).flatten(1).mean(dim=1)
    return total.numpy().reshape(lead)


def lpips_distance(x: ArrayLike, y: ArrayLike, fe: FeatureExtractor,
                   layer_weights: Optional[Sequence[float]] = None) -> float:
    """
    Weighted sum over layers of the spatial mean squared distance between
    channel-normalised features.

    Raises:
        MetricInputError: If shapes differ or the extractor cannot take the images
    """
    return float(np.mean(lpips_batch(x, y, fe, layer_weights)))


def per_frame_scores(pred: ArrayLike, target: ArrayLike, fe: FeatureExtractor) -> Dict[str, np.ndarray]:
    """PSNR / SSIM / LPIPS of every frame; inputs (..., H, W, 3), outputs shaped like the leading axes."""
    return {
        "psnr": psnr_batch(pred, target),
        "ssim": ssim_batch(pred, target),
        "lpips": lpips_batch(pred, target, fe),
    }


# ----- Video features and FVD -----

class RandomProjectionVideoExtractor:
    """Fixed random 3-D convolution with average pooling onto a small grid."""

    def __init__(self, seed: int = 0, channels: int = 16, grid=(2, 2, 2)):
        gen = torch.Generator().manual_seed(seed)
        self.conv = _seeded_conv(nn.Conv3d(3, channels, kernel_size=3, padding=1).double(), gen)
        self.grid = grid

    @torch.no_grad()
    def __call__(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips.double().permute(0, 4, 1, 2, 3)
        x = F.relu(self.conv(x))
        return F.adaptive_avg_pool3d(x, self.grid).flatten(1)


class TorchvisionVideoExtractor:  # pragma: no cover
    """r3d_18 video backbone with the classifier removed; optional weights file."""

    MEAN = (0.43216, 0.394666, 0.37645)
    STD = (0.22803, 0.22145, 0.216989)

    def __init__(self, weights_path: Optional[str] = None):
        from torchvision.models.video import r3d_18

        self.model = r3d_18(weights=None)
        if weights_path:
            self.model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.model.fc = nn.Identity()
        self.model = self.model.double().eval()

    @torch.no_grad()
    def __call__(self, clips: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.MEAN, dtype=torch.float64).view(1, 3, 1, 1, 1)
        std = torch.tensor(self.STD, dtype=torch.float64).view(1, 3, 1, 1, 1)
        x = (clips.double().permute(0, 4, 1, 2, 3) - mean) / std
        return self.model(x)


def extract_video_features(clips: ArrayLike, fe: VideoFeatureExtractor, batch_size: int = 256) -> np.ndarray:
    """
    Features of every clip, computed in batches of exactly `batch_size`.

    The final partial batch is zero-padded to full size and the padded rows
    are dropped from the result.
    """
    clips = _to_numpy(clips)
    if clips.ndim != 5:
        raise MetricInputError(f"clips must be (N, L, H, W, 3), got {clips.shape}")
    n = clips.shape[0]
    out = []
    for start in range(0, n, batch_size):
        chunk = clips[start:start + batch_size]
        valid = chunk.shape[0]
        if valid < batch_size:
            pad = np.zeros((batch_size - valid, *chunk.shape[1:]), dtype=chunk.dtype)
            chunk = np.concatenate([chunk, pad])
        feats = fe(torch.from_numpy(np.ascontiguousarray(chunk)))
        out.append(_to_numpy(feats)[:valid])
    return np.concatenate(out).astype(np.float64)


def gaussian_moments(features: ArrayLike):
    """Mean and unbiased covariance of (N, D) features."""
    f = _to_numpy(features)
    if f.ndim != 2 or f.shape[0] < 2:
        raise MetricInputError(f"need at least 2 feature rows, got shape {f.shape}")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False, ddof=1))


def _clipped_eigenvalues(matrix: np.ndarray, name: str):
    w, v = linalg.eigh(matrix)
    floor = -EIGEN_TOL * max(float(np.abs(w).max()) if w.size else 0.0, 1e-300)
    if w.size and w.min() < floor:
        raise MetricInputError(f"{name} is not positive semi-definite (eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def _check_cov(cov: np.ndarray, d: int, name: str) -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise MetricInputError(f"{name} must be square, got {cov.shape}")
    if cov.shape[0] != d:
        raise MetricInputError(f"{name} is {cov.shape}, mean has {d} entries")
    scale = max(float(np.abs(cov).max()), 1e-300)
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
        raise MetricInputError(f"{name} is not symmetric")


def frechet_distance(mu1: ArrayLike, cov1: ArrayLike, mu2: ArrayLike, cov2: ArrayLike) -> float:
    """
    Fréchet distance between two Gaussians.

    ||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)), with the trace of
    the root taken as tr sqrt(s1 cov2 s1) where s1 = cov1^(1/2) so both roots
    come from symmetric eigendecompositions.

    Raises:
        MetricInputError: If a covariance is non-square, asymmetric, or has an
            eigenvalue below the relative tolerance
    """
    mu1, mu2 = np.atleast_1d(_to_numpy(mu1)), np.atleast_1d(_to_numpy(mu2))
    cov1, cov2 = np.atleast_2d(_to_numpy(cov1)), np.atleast_2d(_to_numpy(cov2))
    if mu1.shape != mu2.shape or mu1.ndim != 1:
        raise MetricInputError(f"means differ in shape: {mu1.shape} vs {mu2.shape}")
    _check_cov(cov1, mu1.shape[0], "cov1")
    _check_cov(cov2, mu1.shape[0], "cov2")

    w1, v1 = _clipped_eigenvalues(cov1, "cov1")
    s1 = (v1 * np.sqrt(w1)) @ v1.T
    inner = s1 @ cov2 @ s1
    inner = (inner + inner.T) / 2.0
    w, _ = _clipped_eigenvalues(inner, "cov1^(1/2) cov2 cov1^(1/2)")
    _clipped_eigenvalues(cov2, "cov2")

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.sqrt(w).sum())
    log.debug("frechet_distance(d=%d) = %s", mu1.shape[0], value)
    return max(value, 0.0)


def fvd(real: ArrayLike, gen: ArrayLike, fe: VideoFeatureExtractor, batch_size: int = 256) -> float:
    """
    Fréchet video distance between two clip sets.

    Raises:
        MetricInputError: If either side has fewer than 2 clips
    """
    real, gen = _to_numpy(real), _to_numpy(gen)
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise MetricInputError(f"FVD needs at least 2 clips per side, got {real.shape[0]} and {gen.shape[0]}")
    mu_r, cov_r = gaussian_moments(extract_video_features(real, fe, batch_size))
    mu_g, cov_g = gaussian_moments(extract_video_features(gen, fe, batch_size))
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


def make_image_extractor(name: str = "random_projection", seed: int = 0) -> FeatureExtractor:
    if name == "random_projection":
        return RandomProjectionExtractor(seed=seed)
    if name == "lpips_alex":  # pragma: no cover
        return LpipsNetExtractor("alex")
    raise MetricInputError(f"unknown image extractor {name!r}")


def make_video_extractor(name: str = "random_projection", seed: int = 0,
                         weights: Optional[str] = None) -> VideoFeatureExtractor:
    if name == "random_projection":
        return RandomProjectionVideoExtractor(seed=seed)
    if name == "r3d_18":  # pragma: no cover
        return TorchvisionVideoExtractor(weights)
    raise MetricInputError(f"unknown video extractor {name!r}")
