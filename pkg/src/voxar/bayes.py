"""Monte-Carlo dropout inference, thresholding segmentation and features.

Repeated stochastic forward passes with channel dropout left on give a
per-voxel sample of predicted means; their mean and standard deviation
(mu, sigma) approximate a Bayesian predictive distribution. Sigma maps
from a model fit only to anomaly-free volumes localize anomalies, which
the mean-intensity threshold turns into binary masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, UsageError
from .model import Dropout, ModelParams, model_forward

__all__ = [
    "UncertaintyMaps",
    "FeatureVolume",
    "mc_passes",
    "moments",
    "tau_segment",
    "dice",
    "export_features",
]


@dataclass
class UncertaintyMaps:
    mu: np.ndarray  # (H, W, D) mean of predicted means across passes
    sigma: np.ndarray  # (H, W, D) sample standard deviation, divisor T-1
    passes: int


@dataclass
class FeatureVolume:
    variant: str  # chi = raw, xi = raw + mu + sigma, psi = penultimate
    channels: np.ndarray  # (C, H, W, D)


def mc_passes(params: ModelParams, x: np.ndarray, passes: int, rng,
              rate: Optional[float] = None):
    """Run ``passes`` stochastic forwards; returns (emissions, penultimate).

    Each pass gets an independent generator seeded deterministically from
    ``rng``, so results are reproducible from the master seed and
    independent of scheduling. The penultimate activations come from one
    extra pass with dropout disabled.
    """
    if passes < 2:
        raise UsageError(f"need at least 2 passes, got {passes}")
    if rate is None:
        rate = params.cfg.dropout_rate
    seeds = rng.integers(0, 2**63 - 1, size=passes)
    emissions = []
    for t in range(passes):
        dropout = Dropout(rate, np.random.default_rng(int(seeds[t]))) if rate > 0 else None
        emissions.append(model_forward(x, params, dropout).emission)
    penultimate = model_forward(x, params).penultimate
    return emissions, penultimate.data


def moments(emissions) -> UncertaintyMaps:
    """Per-voxel sample mean and standard deviation of the predicted means.

    Sums run over deviations from the first pass so that identical passes
    yield exactly zero sigma rather than rounding dust.
    """
    if len(emissions) < 2:
        raise UsageError(f"need at least 2 passes, got {len(emissions)}")
    means = np.stack([e.mean.data[0] for e in emissions])
    first = means[0]
    mu = first + (means - first).mean(axis=0)
    dev = means - mu
    sigma = np.sqrt((dev * dev).sum(axis=0) / (len(emissions) - 1))
    return UncertaintyMaps(mu=mu, sigma=sigma, passes=len(emissions))


def tau_segment(v: np.ndarray, roi: Optional[np.ndarray] = None) -> np.ndarray:
    """Voxels strictly above the mean intensity (within the ROI, if given).

    Invariant to additive shifts and positive rescaling of ``v``.
    """
    v = np.asarray(v, dtype=np.float64)
    if roi is None:
        roi = np.ones(v.shape, dtype=bool)
    else:
        roi = np.asarray(roi, dtype=bool)
        if roi.shape != v.shape:
            raise ShapeError(f"roi shape {roi.shape} != volume shape {v.shape}")
        if not roi.any():
            raise UsageError("tau_segment: empty roi")
    threshold = v[roi].mean()
    return (v > threshold) & roi


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a&b| / (|a| + |b|); two empty masks count as perfect overlap."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def export_features(params: ModelParams, x: np.ndarray, variant: str,
                    passes: int = 20, rng=None) -> FeatureVolume:
    """Feature channels for downstream models.

    chi: the raw volume alone. xi: raw volume concatenated with the MC
    dropout mu and sigma maps. psi: penultimate-layer activations from a
    dropout-free pass.
    """
    x = np.asarray(x, dtype=np.float64)
    if variant == "chi":
        return FeatureVolume(variant="chi", channels=x[None].copy())
    if variant == "xi":
        if rng is None:
            raise UsageError("variant xi needs a generator for the dropout passes")
        emissions, _ = mc_passes(params, x, passes, rng)
        maps = moments(emissions)
        return FeatureVolume(variant="xi", channels=np.stack([x, maps.mu, maps.sigma]))
    if variant == "psi":
        return FeatureVolume(variant="psi", channels=model_forward(x, params).penultimate.data)
    raise UsageError(f"unknown feature variant {variant!r} (expected chi, xi or psi)")
