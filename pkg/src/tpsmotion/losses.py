"""Auxiliary and reconstruction losses as pure diagnostics.

The learned encoder and the perceptual network are replaced by the fixed
mean-pool pyramid from :mod:`tpsmotion.sampler`, so these values are not
comparable with losses from a trained model. All L1 reductions are means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .errors import ContractError
from .geometry import (
    AffineTransform,
    PointsLike,
    TpsTransform,
    apply_tps,
    as_points,
    solve_tps,
)
from .motion import DenseFlow, SamplingGrid
from .sampler import bilinear_warp, build_pyramid, resize_flow, valid_sample_mask

__all__ = [
    "RandomTpsSpec",
    "bg_consistency_loss",
    "equivariance_loss",
    "multires_l1",
    "random_tps",
    "warp_loss",
]


@dataclass(frozen=True)
class RandomTpsSpec:
    """A ``grid_size`` x ``grid_size`` lattice jittered by uniform(-sigma, sigma)."""

    grid_size: int = 5
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 2:
            raise ContractError(f"grid_size must be >= 2, got {self.grid_size}")
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")


def random_tps(spec: RandomTpsSpec) -> TpsTransform:
    g = np.linspace(-1.0, 1.0, spec.grid_size)
    xx, yy = np.meshgrid(g, g)
    centers = np.column_stack([xx.ravel(), yy.ravel()])
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    targets = centers + rng.uniform(-spec.sigma, spec.sigma, size=centers.shape)
    return solve_tps(centers, targets)


def equivariance_loss(
    detected_on_warped: PointsLike, t_ran: TpsTransform, detected_on_source: PointsLike
) -> float:
    """Mean absolute gap between keypoints on the deformed image and deformed keypoints."""
    a = as_points(detected_on_warped)
    b = as_points(detected_on_source)
    if a.shape != b.shape:
        raise ContractError(f"keypoint sets differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - apply_tps(t_ran, b))))


def bg_consistency_loss(a_fwd: AffineTransform, a_bwd: AffineTransform) -> float:
    """Sum of ``|entries|`` of ``lift(a_bwd) @ lift(a_fwd) - I``."""
    prod = a_bwd.homogeneous() @ a_fwd.homogeneous()
    return float(np.abs(prod - np.eye(3)).sum())


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def warp_loss(src: ArrayLike, drv: ArrayLike, flow: DenseFlow, levels: int = 1) -> float:
    """Sum over pyramid levels of the mean ``|warp(src_i) - drv_i|``.

    Pixels whose sample coordinate leaves ``[-1, 1]^2`` are excluded. A level
    with no valid pixel contributes 0.
    """
    src, drv = _same_shape(src, drv)
    total = 0.0
    for s, d in zip(build_pyramid(src, levels), build_pyramid(drv, levels)):
        level_flow = resize_flow(flow, SamplingGrid(*s.shape[-2:]))
        valid = valid_sample_mask(level_flow)
        if not valid.any():
            continue
        diff = np.abs(bilinear_warp(s, level_flow, "clamp") - d)
        total += float(diff[:, valid].mean())
    return total


def multires_l1(a: ArrayLike, b: ArrayLike, scales: int = 1) -> float:
    """Sum over ``scales`` pyramid levels of the mean absolute difference."""
    a, b = _same_shape(a, b)
    return float(
        sum(np.abs(x - y).mean() for x, y in zip(build_pyramid(a, scales), build_pyramid(b, scales)))
    )
