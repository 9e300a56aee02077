"""Reconstruction and generation metrics.

PSNR and SSIM are computed directly on pixel arrays in a documented range
(default [-1, 1], peak 2.0). Distribution distances are Frechet distances
between Gaussian fits of features from the frozen metric network
(:mod:`difftok.features`), so they are comparable within this toolkit only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from .data import ImageDataset
from .errors import ConfigurationError, DomainError, EvaluationError, ShapeError
from .features import RandomFeatureNet, metric_net

PIXEL_PEAK = 2.0  # documented dynamic range of [-1, 1] images
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EIGENVALUE_CLAMP = 1e-10
DEFAULT_EVAL_SUBSET = 512


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = PIXEL_PEAK) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical.

    Args:
        a, b: images of identical shape.
        peak: dynamic range of the pixel values (2.0 for [-1, 1]).
    """
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 7, peak: float = PIXEL_PEAK) -> float:
    """Mean local structural similarity over uniform windows.

    Uses the standard constants C1 = (K1 * L)^2, C2 = (K2 * L)^2 with
    K1 = 0.01, K2 = 0.03, and L = ``peak``. Channels are scored separately
    and averaged.
    """
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 == 0 or window < 1:
        raise DomainError(f"window must be a positive odd integer, got {window}")
    if window > min(a.shape[-2:]):
        raise DomainError(f"window {window} larger than image {tuple(a.shape[-2:])}")
    x = a.detach().cpu().double().numpy()
    y = b.detach().cpu().double().numpy()
    if x.ndim == 2:
        x, y = x[None], y[None]
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def local_mean(arr):
        return ndimage.uniform_filter(arr, size=window, mode="reflect")

    scores = []
    for xc, yc in zip(x, y):
        mu_x, mu_y = local_mean(xc), local_mean(yc)
        var_x = local_mean(xc * xc) - mu_x * mu_x
        var_y = local_mean(yc * yc) - mu_y * mu_y
        cov = local_mean(xc * yc) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class FeatureStats:
    """Gaussian fit of a feature cloud: mean, unbiased covariance, count."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ShapeError(f"covariance {self.cov.shape} does not match mean dim {self.mean.size}")
        if self.n < 2:
            raise EvaluationError(f"need at least 2 samples for covariance, got {self.n}")
        if not np.isfinite(self.mean).all() or not np.isfinite(self.cov).all():
            raise EvaluationError("non-finite feature statistics")

    @property
    def dim(self) -> int:
        return self.mean.size


class FeatureAccumulator:
    """Order-insensitive accumulation of feature statistics.

    Tracks the sum and outer-product sum, so partial accumulators from
    concurrent workers merge associatively.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.n = 0
        self._sum = np.zeros(dim, dtype=np.float64)
        self._outer = np.zeros((dim, dim), dtype=np.float64)

    def update(self, features: torch.Tensor | np.ndarray) -> "FeatureAccumulator":
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.shape[1] != self.dim:
            raise ShapeError(f"features have dim {arr.shape[1]}, expected {self.dim}")
        self.n += arr.shape[0]
        self._sum += arr.sum(axis=0)
        self._outer += arr.T @ arr
        return self

    def merge(self, other: "FeatureAccumulator") -> "FeatureAccumulator":
        if other.dim != self.dim:
            raise ShapeError("cannot merge accumulators of different dims")
        self.n += other.n
        self._sum += other._sum
        self._outer += other._outer
        return self

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise EvaluationError(f"need at least 2 samples, got {self.n}")
        mean = self._sum / self.n
        cov = (self._outer - self.n * np.outer(mean, mean)) / (self.n - 1)
        cov = (cov + cov.T) / 2
        return FeatureStats(mean, cov, self.n)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below the clamp are zeroed."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.where(vals < EIGENVALUE_CLAMP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), computed symmetrically."""
    if s1.dim != s2.dim:
        raise ShapeError(f"feature dims differ: {s1.dim} vs {s2.dim}")
    if np.array_equal(s1.mean, s2.mean) and np.array_equal(s1.cov, s2.cov):
        return 0.0
    diff = s1.mean - s2.mean
    root1 = _sqrtm_psd(s1.cov)
    inner = _sqrtm_psd(root1 @ s2.cov @ root1)
    value = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(inner))
    if not math.isfinite(value):
        raise EvaluationError("non-finite Frechet distance")
    return max(value, 0.0)


def compute_feature_stats(
    images: torch.Tensor, net: RandomFeatureNet | None = None, batch_size: int = 64
) -> FeatureStats:
    net = net or metric_net()
    acc = FeatureAccumulator(net.embed_dim)
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            acc.update(net.embed(images[start : start + batch_size]))
    return acc.finalize()


def eval_subset(dataset: ImageDataset, subset_size: int, seed: int) -> ImageDataset:
    if len(dataset) < subset_size:
        raise ConfigurationError(
            f"dataset has {len(dataset)} images, fewer than the evaluation subset {subset_size}"
        )
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(len(dataset), generator=g)[:subset_size]
    return dataset.subset(idx)


def rfid(
    reconstruct_fn: Callable[[torch.Tensor], torch.Tensor],
    dataset: ImageDataset,
    subset_size: int = DEFAULT_EVAL_SUBSET,
    seed: int = 0,
    net: RandomFeatureNet | None = None,
    batch_size: int = 32,
) -> float:
    """Frechet distance between a fixed subset and its reconstructions."""
    net = net or metric_net()
    subset = eval_subset(dataset, subset_size, seed)
    originals = FeatureAccumulator(net.embed_dim)
    recons = FeatureAccumulator(net.embed_dim)
    for start in range(0, len(subset), batch_size):
        batch = subset.images[start : start + batch_size]
        rec = reconstruct_fn(batch)
        with torch.no_grad():
            originals.update(net.embed(batch))
            recons.update(net.embed(rec))
    return frechet_distance(originals.finalize(), recons.finalize())


def gfid(
    sample_fn: Callable[[int], torch.Tensor],
    dataset: ImageDataset,
    n_samples: int = 256,
    subset_size: int | None = None,
    seed: int = 0,
    net: RandomFeatureNet | None = None,
) -> float:
    """Frechet distance between generated samples and dataset images."""
    net = net or metric_net()
    reference = dataset if subset_size is None else eval_subset(dataset, subset_size, seed)
    samples = sample_fn(n_samples)
    return frechet_distance(
        compute_feature_stats(samples, net), compute_feature_stats(reference.images, net)
    )


def metrics_report(metric: str, value: float, *, n: int, seed: int, model_id: str, solver_steps: int) -> dict:
    """Schema of a serialized metric result."""
    return {
        "metric": metric,
        "value": value,
        "n": n,
        "seed": seed,
        "model_id": model_id,
        "solver_steps": solver_steps,
    }
