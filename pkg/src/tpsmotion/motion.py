"""Contribution maps and the dense backward flow built from K TPS + 1 affine.

Contribution logits are arrays of shape ``(K + 1, H, W)`` with channel 0
reserved for the background affine. A :class:`DenseFlow` stores, for every
driving-frame pixel, the normalized source coordinate to sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError
from .geometry import (
    AffineTransform,
    TpsTransform,
    apply_affine,
    apply_tps,
    as_points,
    normalized_to_pixel,
    pixel_to_normalized,
)

__all__ = [
    "DEFAULT_DROPOUT",
    "DenseFlow",
    "DropoutPlan",
    "SamplingGrid",
    "candidate_coordinates",
    "combine_flows",
    "dropout_contributions",
    "identity_grid",
    "softmax_contributions",
    "synthetic_logits",
]

DEFAULT_DROPOUT = 0.3


@dataclass(frozen=True)
class SamplingGrid:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ContractError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def lattice(self) -> NDArray[np.float64]:
        """Normalized coordinates of all pixel centers, shape ``(H, W, 2)``."""
        xs = pixel_to_normalized(np.arange(self.width), self.width)
        ys = pixel_to_normalized(np.arange(self.height), self.height)
        out = np.empty((self.height, self.width, 2))
        out[..., 0] = xs[None, :]
        out[..., 1] = ys[:, None]
        return out


@dataclass(frozen=True)
class DenseFlow:
    """Backward-mapping coordinate field, ``coords[r, c] = (x, y)`` in the source."""

    coords: NDArray[np.float64]

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ContractError(f"flow coords must have shape (H, W, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ContractError("flow coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def grid(self) -> SamplingGrid:
        return SamplingGrid(*self.coords.shape[:2])

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def pixel_displacement(self) -> NDArray[np.float64]:
        """Displacement in pixels relative to the identity lattice, shape ``(H, W, 2)``.

        The source image is assumed to share this flow's grid.
        """
        h, w = self.grid.shape
        out = np.empty_like(self.coords)
        out[..., 0] = normalized_to_pixel(self.coords[..., 0], w) - np.arange(w)[None, :]
        out[..., 1] = normalized_to_pixel(self.coords[..., 1], h) - np.arange(h)[:, None]
        return out

    @classmethod
    def from_pixel_displacement(cls, disp: ArrayLike) -> DenseFlow:
        disp = np.asarray(disp, dtype=np.float64)
        if disp.ndim != 3 or disp.shape[2] != 2:
            raise ContractError(f"displacement must have shape (H, W, 2), got {disp.shape}")
        h, w = disp.shape[:2]
        coords = np.empty_like(disp)
        coords[..., 0] = pixel_to_normalized(disp[..., 0] + np.arange(w)[None, :], w)
        coords[..., 1] = pixel_to_normalized(disp[..., 1] + np.arange(h)[:, None], h)
        return cls(coords)


def identity_grid(g: SamplingGrid) -> DenseFlow:
    return DenseFlow(g.lattice())


def _check_logits(logits) -> NDArray[np.float64]:
    m = np.asarray(logits, dtype=np.float64)
    if m.ndim < 1 or m.shape[0] < 2:
        raise ContractError(f"need K+1 >= 2 logit channels, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("contribution logits must be finite")
    return m


def softmax_contributions(logits: ArrayLike) -> NDArray[np.float64]:
    """Per-pixel softmax over axis 0 of a ``(K + 1, ...)`` logit stack."""
    m = _check_logits(logits)
    e = np.exp(m - m.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class DropoutPlan:
    """Which TPS channels survive one dropout draw.

    ``keep_flags[k]`` refers to TPS channel ``k + 1``; the background is never
    dropped. Plans built with :meth:`draw` take their flags from
    ``numpy.random.Generator(PCG64(seed)).random(K) < 1 - P``, which numpy
    guarantees to be stream-stable for a fixed seed.
    """

    probability: float
    keep_flags: tuple[bool, ...]
    seed: Optional[int] = None
    generator: str = field(default="numpy.PCG64", compare=False)

    def __post_init__(self):
        p = float(self.probability)
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
        object.__setattr__(self, "probability", p)
        object.__setattr__(self, "keep_flags", tuple(bool(b) for b in self.keep_flags))

    @classmethod
    def draw(cls, probability: float, k: int, seed: int) -> DropoutPlan:
        if not 0.0 <= probability < 1.0:
            raise ContractError(f"dropout probability must lie in [0, 1), got {probability}")
        rng = np.random.Generator(np.random.PCG64(seed))
        keep = rng.random(k) < 1.0 - probability
        return cls(probability, tuple(keep.tolist()), seed)

    def as_dict(self) -> dict:
        return {
            "probability": self.probability,
            "keep_flags": list(self.keep_flags),
            "seed": self.seed,
            "generator": self.generator,
        }


def dropout_contributions(logits: ArrayLike, plan: DropoutPlan) -> NDArray[np.float64]:
    """Softmax with dropped TPS channels and ``1 / (1 - P)`` survivor scaling.

    Stabilized by subtracting the per-pixel max over the *surviving* channels,
    so a huge logit on a dropped channel cannot underflow the denominator.
    With ``P = 0`` and every flag set this is bitwise the plain softmax.
    """
    m = _check_logits(logits)
    if len(plan.keep_flags) != m.shape[0] - 1:
        raise ContractError(
            f"plan has {len(plan.keep_flags)} flags for {m.shape[0] - 1} TPS channels"
        )
    keep = np.array((True,) + plan.keep_flags)
    scale = np.where(keep, 1.0 / (1.0 - plan.probability), 0.0)
    scale[0] = 1.0
    shape = (-1,) + (1,) * (m.ndim - 1)
    peak = m[keep].max(axis=0, keepdims=True)
    e = np.exp(np.where(keep.reshape(shape), m - peak, -np.inf)) * scale.reshape(shape)
    return e / e.sum(axis=0, keepdims=True)


def candidate_coordinates(
    tps: Sequence[TpsTransform], bg: AffineTransform, grid: SamplingGrid
) -> NDArray[np.float64]:
    """Each of the K+1 transforms evaluated on the lattice, shape ``(K+1, H, W, 2)``."""
    p = grid.lattice()
    out = np.empty((len(tps) + 1,) + p.shape)
    out[0] = apply_affine(bg, p)
    for k, t in enumerate(tps, start=1):
        out[k] = apply_tps(t, p)
    return out


def combine_flows(
    tps: Sequence[TpsTransform],
    bg: AffineTransform,
    contribs: ArrayLike,
    grid: SamplingGrid,
) -> DenseFlow:
    """Blend the background and K TPS maps with per-pixel contribution weights."""
    m = np.asarray(contribs, dtype=np.float64)
    if m.shape != (len(tps) + 1,) + grid.shape:
        raise ContractError(
            f"contributions {m.shape} do not match {len(tps)} transforms on a "
            f"{grid.height}x{grid.width} grid"
        )
    cand = candidate_coordinates(tps, bg, grid)
    # fixed channel order keeps results independent of how work is split
    coords = m[0][..., None] * cand[0]
    for k in range(1, len(cand)):
        coords += m[k][..., None] * cand[k]
    return DenseFlow(coords)


def synthetic_logits(
    driving: ArrayLike, grid: SamplingGrid, sigma: float = 0.25, gain: float = 4.0
) -> NDArray[np.float64]:
    """Gaussian-bump logits centered on each transform's driving keypoints.

    ``driving`` has shape ``(K, N, 2)``. The background logit is 0 everywhere;
    TPS channel ``k`` gets ``gain * sum_i exp(-|p - d_ki|^2 / (2 sigma^2))``.
    """
    d = as_points(driving)
    if d.ndim != 3:
        raise ContractError(f"driving keypoints must be (K, N, 2), got {d.shape}")
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    p = grid.lattice()
    out = np.zeros((len(d) + 1,) + grid.shape)
    for k, pts in enumerate(d, start=1):
        diff = p[:, :, None, :] - pts
        r2 = np.einsum("hwij,hwij->hwi", diff, diff)
        out[k] = gain * np.exp(-r2 / (2.0 * sigma * sigma)).sum(axis=-1)
    return out
