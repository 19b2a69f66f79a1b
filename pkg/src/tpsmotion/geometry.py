"""Points, affine maps and thin-plate splines in normalized image coordinates.

Coordinates follow one convention everywhere in the package: an image of
width ``W`` spans ``[-1, 1]`` horizontally with pixel centers at
``x_pix = (x_norm + 1) / 2 * (W - 1)`` (the same holds vertically with
``H``). A single-pixel axis maps to the origin.

Points are plain ``numpy`` arrays whose last axis has length 2 and holds
``(x, y)``. Every function that takes a point also takes a stack of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError, DegenerateError, DomainError

__all__ = [
    "AffineTransform",
    "KeypointSet",
    "TpsTransform",
    "apply_affine",
    "apply_tps",
    "as_points",
    "bending_energy",
    "compose_affine",
    "invert_affine",
    "normalized_to_pixel",
    "pixel_to_normalized",
    "radial_basis",
    "random_nondegenerate_points",
    "side_condition_residual",
    "solve_tps",
    "tps_jacobian",
]

# Largest condition number of the TPS system accepted before reporting degeneracy.
MAX_CONDITION = 1e12
# Side conditions looser than this make the bending energy undefined.
SIDE_CONDITION_TOL = 1e-6
MIN_INVERTIBLE_DET = 1e-12

FRAMES = ("source", "driving")


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KeypointSet:
    """Ordered control points of one frame, shape ``(N, 2)``."""

    points: NDArray[np.float64]
    frame: str = "driving"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ContractError(f"keypoints must have shape (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("keypoints must be finite")
        if self.frame not in FRAMES:
            raise ContractError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]


PointsLike = Union[KeypointSet, ArrayLike]


def as_points(p: PointsLike) -> NDArray[np.float64]:
    """Return ``p`` as a float array whose last axis holds ``(x, y)``."""
    if isinstance(p, KeypointSet):
        return p.points
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1:] != (2,):
        raise ContractError(f"points need a trailing axis of length 2, got shape {arr.shape}")
    return arr


def pixel_to_normalized(pix: ArrayLike, size: int) -> NDArray[np.float64]:
    """Map pixel-center indices along an axis of ``size`` pixels to ``[-1, 1]``."""
    pix = np.asarray(pix, dtype=np.float64)
    if size <= 1:
        return np.zeros_like(pix)
    return 2.0 * pix / (size - 1) - 1.0


def normalized_to_pixel(x: ArrayLike, size: int) -> NDArray[np.float64]:
    """Inverse of :func:`pixel_to_normalized`."""
    x = np.asarray(x, dtype=np.float64)
    return (x + 1.0) * 0.5 * (size - 1)


# ---------------------------------------------------------------------------
# Affine transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineTransform:
    """A 2x3 matrix acting as ``p -> M[:, :2] @ p + M[:, 2]``."""

    matrix: NDArray[np.float64]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ContractError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ContractError("affine matrix must be finite")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> AffineTransform:
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def from_flat(cls, values: ArrayLike) -> AffineTransform:
        """Build from 6 numbers in row-major order."""
        v = np.asarray(values, dtype=np.float64)
        if v.size != 6:
            raise ContractError(f"expected 6 affine entries, got {v.size}")
        return cls(v.reshape(2, 3))

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def homogeneous(self) -> NDArray[np.float64]:
        """The 3x3 lift with bottom row ``(0, 0, 1)``."""
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])


def apply_affine(a: AffineTransform, p: PointsLike) -> NDArray[np.float64]:
    p = as_points(p)
    m = a.matrix
    return p @ m[:, :2].T + m[:, 2]


def compose_affine(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Return ``a o b``, i.e. the map applying ``b`` first."""
    return AffineTransform((a.homogeneous() @ b.homogeneous())[:2])


def invert_affine(a: AffineTransform) -> AffineTransform:
    det = a.determinant
    if not abs(det) > MIN_INVERTIBLE_DET:
        raise DegenerateError(f"affine block is singular (determinant {det:.3e})")
    lin = a.matrix[:, :2]
    inv = np.array([[lin[1, 1], -lin[0, 1]], [-lin[1, 0], lin[0, 0]]]) / det
    return AffineTransform(np.hstack([inv, -(inv @ a.matrix[:, 2])[:, None]]))


# ---------------------------------------------------------------------------
# Thin-plate splines
# ---------------------------------------------------------------------------


def radial_basis(r):
    """Thin-plate kernel ``U(r) = r^2 log r^2`` with ``U(0) = 0``.

    Accepts a scalar or an array of distances. Negative distances raise
    :class:`DomainError`.
    """
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("radial_basis needs nonnegative distances")
    out = _kernel_from_sq(arr * arr)
    return float(out) if out.ndim == 0 else out


def _kernel_from_sq(r2: NDArray) -> NDArray:
    # r2 may underflow to 0 for tiny r; the limit there is 0
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, r2 * np.log(safe), 0.0)


def _sq_dists(p: NDArray, centers: NDArray) -> NDArray:
    d = p[..., None, :] - centers
    return np.einsum("...ij,...ij->...i", d, d)


@dataclass(frozen=True)
class TpsTransform:
    """``T(p) = A [p; 1] + sum_i w_i U(|c_i - p|)``.

    Attributes
    ----------
    affine : AffineTransform
        The polynomial part ``A``.
    weights : ndarray, shape (N, 2)
        Radial weight vectors, one per center.
    centers : ndarray, shape (N, 2)
        Kernel centers.
    """

    affine: AffineTransform
    weights: NDArray[np.float64]
    centers: NDArray[np.float64]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        c = as_points(self.centers)
        if c.ndim != 2 or w.shape != c.shape:
            raise ContractError(
                f"weights {w.shape} and centers {c.shape} must both be (N, 2)"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(c))):
            raise ContractError("TPS coefficients must be finite")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "centers", _frozen(c))

    @classmethod
    def from_affine(cls, affine: AffineTransform, centers: PointsLike) -> TpsTransform:
        c = as_points(centers)
        return cls(affine, np.zeros_like(c), c)

    @classmethod
    def identity(cls, centers: PointsLike) -> TpsTransform:
        return cls.from_affine(AffineTransform.identity(), centers)

    def __call__(self, p: PointsLike) -> NDArray[np.float64]:
        return apply_tps(self, p)


def _check_pair(centers: NDArray, targets: NDArray) -> None:
    if centers.ndim != 2 or targets.ndim != 2:
        raise ContractError("centers and targets must be (N, 2) arrays")
    if len(centers) != len(targets):
        raise ContractError(
            f"got {len(centers)} centers but {len(targets)} targets"
        )
    if len(centers) < 3:
        raise ContractError(f"a TPS needs at least 3 centers, got {len(centers)}")
    if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(targets))):
        raise ContractError("centers and targets must be finite")


def solve_tps(centers: PointsLike, targets: PointsLike) -> TpsTransform:
    """Exact thin-plate interpolant with ``T(centers[i]) == targets[i]``.

    Solves the bordered system ``[[K, P], [P^T, 0]] [w; a] = [targets; 0]``
    by LU with partial pivoting, where ``K_ij = U(|c_i - c_j|)`` and
    ``P = [1, x, y]``.

    Raises
    ------
    ContractError
        Mismatched lengths, fewer than 3 points, or non-finite input.
    DegenerateError
        Coincident or collinear centers, or a system whose condition number
        exceeds ``1e12``.
    """
    c = as_points(centers)
    t = as_points(targets)
    _check_pair(c, t)
    n = len(c)

    d2 = _sq_dists(c, c)
    iu = np.triu_indices(n, 1)
    dup = np.flatnonzero(d2[iu] < 1e-24)
    if dup.size:
        i, j = iu[0][dup[0]], iu[1][dup[0]]
        raise DegenerateError(f"centers {i} and {j} coincide at {tuple(c[i])}")

    poly = np.hstack([np.ones((n, 1)), c])
    s = np.linalg.svd(poly, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise DegenerateError(f"the {n} centers are collinear")

    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _kernel_from_sq(d2)
    system[:n, n:] = poly
    system[n:, :n] = poly.T
    cond = np.linalg.cond(system)
    if not cond <= MAX_CONDITION:
        raise DegenerateError(f"TPS system is ill-conditioned (condition number {cond:.3e})")

    rhs = np.zeros((n + 3, 2))
    rhs[:n] = t
    sol = np.linalg.solve(system, rhs)
    a = sol[n:]  # rows: constant, x, y
    matrix = np.column_stack([a[1], a[2], a[0]])
    return TpsTransform(AffineTransform(matrix), sol[:n], c)


def apply_tps(t: TpsTransform, p: PointsLike) -> NDArray[np.float64]:
    p = as_points(p)
    u = _kernel_from_sq(_sq_dists(p, t.centers))
    return apply_affine(t.affine, p) + u @ t.weights


def tps_jacobian(t: TpsTransform, p: PointsLike) -> NDArray[np.float64]:
    """Spatial derivative ``dT/dp`` with shape ``(..., 2, 2)`` (output, input).

    Uses ``grad_p U(|p - c|) = 2 (log r^2 + 1) (p - c)``, which vanishes at
    the center.
    """
    p = as_points(p)
    d = p[..., None, :] - t.centers
    r2 = np.einsum("...ij,...ij->...i", d, d)
    g = np.where(r2 > 0, 2.0 * (np.log(np.where(r2 > 0, r2, 1.0)) + 1.0), 0.0)
    radial = np.einsum("...i,io,...ij->...oj", g, t.weights, d)
    return t.affine.matrix[:, :2] + radial


def side_condition_residual(t: TpsTransform) -> float:
    """Largest of ``|sum w|``, ``|sum w x|``, ``|sum w y|`` over both components."""
    poly = np.hstack([np.ones((len(t.centers), 1)), t.centers])
    return float(np.max(np.abs(poly.T @ t.weights)))


def bending_energy(t: TpsTransform) -> float:
    """Bending energy as the quadratic form ``sum_ij (w_i . w_j) U(|c_i - c_j|)``.

    This equals the integral of squared second derivatives up to a positive
    constant and is only finite when the side conditions hold.
    """
    resid = side_condition_residual(t)
    if resid > SIDE_CONDITION_TOL:
        raise ContractError(
            f"side conditions violated by {resid:.3e}; bending energy is unbounded"
        )
    k = _kernel_from_sq(_sq_dists(t.centers, t.centers))
    e = float(np.sum(t.weights * (k @ t.weights)))
    # conditionally positive definite kernel: negatives are rounding noise
    return max(e, 0.0)


def random_nondegenerate_points(
    rng: np.random.Generator,
    n: int,
    low: float = -1.0,
    high: float = 1.0,
    min_separation: float = 0.05,
    max_tries: int = 1000,
) -> NDArray[np.float64]:
    """Draw ``n`` uniform points with pairwise gaps and a well-spread hull.

    Rejection sampling: a draw is kept when every pair is at least
    ``min_separation`` apart and the smallest singular value of the
    centered cloud is at least ``min_separation`` (far from collinear).
    """
    for _ in range(max_tries):
        pts = rng.uniform(low, high, size=(n, 2))
        d2 = _sq_dists(pts, pts)
        d2[np.diag_indices(n)] = np.inf
        if d2.min() < min_separation**2:
            continue
        s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if s[-1] / np.sqrt(n) < min_separation:
            continue
        return pts
    raise DegenerateError(f"could not draw {n} separated points in {max_tries} tries")
