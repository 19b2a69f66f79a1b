"""Backward bilinear warping, occlusion masking and mean-pool pyramids.

Feature maps are ``(C, H, W)`` arrays; occlusion masks are ``(H, W)`` arrays
with values in ``[0, 1]``. Pyramids are plain lists, level 0 first.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError
from .geometry import normalized_to_pixel
from .motion import DenseFlow, SamplingGrid, identity_grid

__all__ = [
    "BORDER_MODES",
    "apply_mask",
    "bilinear_warp",
    "build_pyramid",
    "downsample",
    "resize_flow",
    "valid_sample_mask",
    "warp_mask_pyramid",
]

BORDER_MODES = ("clamp", "zero")
# sample positions this close to a pixel center are snapped onto it
_SNAP = 1e-9
_INSIDE_SLACK = 1e-9


def _feature_map(x, name="feature map") -> NDArray[np.float64]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ContractError(f"{name} must have shape (C, H, W), got {a.shape}")
    return a


def _axis_taps(pos: NDArray, size: int):
    pos = np.clip(pos, 0.0, size - 1)
    rounded = np.rint(pos)
    pos = np.where(np.abs(pos - rounded) < _SNAP, rounded, pos)
    lo = np.clip(np.floor(pos), 0, max(size - 2, 0)).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, pos - lo


def valid_sample_mask(flow: DenseFlow) -> NDArray[np.bool_]:
    """True where the sample coordinate lies inside ``[-1, 1]^2``."""
    c = flow.coords
    return np.all(np.abs(c) <= 1.0 + _INSIDE_SLACK, axis=-1)


def bilinear_warp(src: ArrayLike, flow: DenseFlow, border: str = "clamp") -> NDArray[np.float64]:
    """Sample ``src`` at the flow's coordinates.

    The output takes the flow's spatial size; ``src`` may have any size since
    coordinates are normalized. ``border="clamp"`` replicates edge pixels,
    ``border="zero"`` yields 0 wherever the coordinate leaves ``[-1, 1]^2``.
    """
    src = _feature_map(src)
    if border not in BORDER_MODES:
        raise ContractError(f"border must be one of {BORDER_MODES}, got {border!r}")
    _, h, w = src.shape
    px = normalized_to_pixel(flow.coords[..., 0], w)
    py = normalized_to_pixel(flow.coords[..., 1], h)
    x0, x1, fx = _axis_taps(px, w)
    y0, y1, fy = _axis_taps(py, h)

    top = (1.0 - fx) * src[:, y0, x0] + fx * src[:, y0, x1]
    bottom = (1.0 - fx) * src[:, y1, x0] + fx * src[:, y1, x1]
    out = (1.0 - fy) * top + fy * bottom
    if border == "zero":
        out = np.where(valid_sample_mask(flow), out, 0.0)
    return out


def apply_mask(warped: ArrayLike, mask: ArrayLike) -> NDArray[np.float64]:
    warped = _feature_map(warped, "warped map")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != warped.shape[1:]:
        raise ContractError(f"mask {mask.shape} does not match feature map {warped.shape[1:]}")
    if np.any(mask < 0) or np.any(mask > 1) or np.any(np.isnan(mask)):
        raise ContractError("occlusion mask values must lie in [0, 1]")
    return warped * mask


def downsample(x: ArrayLike) -> NDArray[np.float64]:
    """2x2 mean pooling; each side becomes ``max(1, n // 2)``.

    Window indices are clamped to the input, so a side of length 1 is pooled
    with itself and an odd trailing row or column is dropped. Accepts
    ``(C, H, W)`` maps and ``(H, W)`` masks.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        return downsample(a[None])[0]
    a = _feature_map(a)
    _, h, w = a.shape
    if h < 2 and w < 2:
        raise ContractError("cannot downsample a 1x1 map")
    rows = np.minimum(2 * np.arange(max(1, h // 2)), h - 1)
    cols = np.minimum(2 * np.arange(max(1, w // 2)), w - 1)
    r1 = np.minimum(rows + 1, h - 1)
    c1 = np.minimum(cols + 1, w - 1)
    return 0.25 * (
        a[:, rows][:, :, cols] + a[:, rows][:, :, c1] + a[:, r1][:, :, cols] + a[:, r1][:, :, c1]
    )


def _level_shapes(h: int, w: int, levels: int) -> list[tuple[int, int]]:
    if levels < 1:
        raise ContractError(f"need at least one pyramid level, got {levels}")
    shapes = [(h, w)]
    for _ in range(levels - 1):
        if h < 2 and w < 2:
            raise ContractError(f"{levels} levels exceed what a {shapes[0]} input supports")
        h, w = max(1, h // 2), max(1, w // 2)
        shapes.append((h, w))
    return shapes


def build_pyramid(x: ArrayLike, levels: int) -> list[NDArray[np.float64]]:
    a = np.asarray(x, dtype=np.float64)
    _level_shapes(*a.shape[-2:], levels)
    out = [a]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


def resize_flow(flow: DenseFlow, target: SamplingGrid) -> DenseFlow:
    """Bilinearly resample the coordinate field onto ``target``.

    Values are normalized coordinates and therefore need no rescaling.
    """
    field = np.moveaxis(flow.coords, -1, 0)
    resampled = bilinear_warp(field, identity_grid(target), "clamp")
    return DenseFlow(np.moveaxis(resampled, 0, -1))


def warp_mask_pyramid(
    src: ArrayLike, flow: DenseFlow, masks: Sequence[ArrayLike], levels: int
) -> list[NDArray[np.float64]]:
    """Per level: downsample ``src``, warp it with the resized flow, apply the mask."""
    if len(masks) < levels:
        raise ContractError(f"need {levels} masks, got {len(masks)}")
    out = []
    for j, feat in enumerate(build_pyramid(_feature_map(src), levels)):
        grid = SamplingGrid(*feat.shape[1:])
        warped = bilinear_warp(feat, resize_flow(flow, grid))
        out.append(apply_mask(warped, masks[j]))
    return out
