"""Recover the keypoints that generated an observed dense flow.

The forward model solves one TPS per transform (centers = driving
keypoints, targets = source keypoints), blends them with fixed contribution
maps and compares the result with the target flow at a set of probe pixels.
Levenberg-Marquardt with a central-difference Jacobian drives the residual
down. The keypoint-to-flow map is not injective, so success is judged on
the residual, never on keypoint positions.

Unknowns are packed as ``[driving.ravel(), source.ravel(), bg.ravel()?]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ContractError, DegenerateError
from .geometry import (
    AffineTransform,
    apply_affine,
    apply_tps,
    random_nondegenerate_points,
    solve_tps,
)
from .motion import DenseFlow, SamplingGrid, combine_flows, softmax_contributions, synthetic_logits

__all__ = [
    "FitConfig",
    "FitProblem",
    "FitReport",
    "fit_keypoints",
    "flow_residual",
    "grid_init",
    "numeric_jacobian",
    "planted_problem",
    "probe_pixels",
]

DAMPING_UP = 10.0
DAMPING_DOWN = 10.0
DAMPING_FLOOR = 1e-12


def probe_pixels(grid: SamplingGrid, count: int = 16, full: bool = False) -> NDArray[np.intp]:
    """Pixel ``(row, col)`` pairs on a uniform ``count`` x ``count`` subgrid.

    ``full=True`` returns every pixel of the grid.
    """
    if full:
        rows, cols = np.arange(grid.height), np.arange(grid.width)
    else:
        rows = np.unique(np.rint(np.linspace(0, grid.height - 1, count)).astype(np.intp))
        cols = np.unique(np.rint(np.linspace(0, grid.width - 1, count)).astype(np.intp))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.column_stack([rr.ravel(), cc.ravel()])


@dataclass
class FitProblem:
    """A target flow, fixed contribution maps and the probe pixels to fit on.

    ``contribs`` are normalized maps of shape ``(K+1, H, W)`` on the target grid.
    When ``fit_bg`` is false the background affine ``bg`` is held fixed.
    """

    target: DenseFlow
    k: int
    n: int
    contribs: NDArray[np.float64]
    bg: AffineTransform = field(default_factory=AffineTransform.identity)
    fit_bg: bool = False
    sample_pixels: Optional[NDArray[np.intp]] = None

    def __post_init__(self):
        grid = self.target.grid
        if self.k < 1 or self.n < 3:
            raise ContractError(f"need K >= 1 and N >= 3, got K={self.k}, N={self.n}")
        self.contribs = np.asarray(self.contribs, dtype=np.float64)
        if self.contribs.shape != (self.k + 1,) + grid.shape:
            raise ContractError(
                f"contributions {self.contribs.shape} do not match K={self.k} on {grid.shape}"
            )
        if self.sample_pixels is None:
            self.sample_pixels = probe_pixels(grid)
        px = np.asarray(self.sample_pixels, dtype=np.intp).reshape(-1, 2)
        if np.any(px < 0) or np.any(px[:, 0] >= grid.height) or np.any(px[:, 1] >= grid.width):
            raise ContractError("probe pixels must lie on the target grid")
        if len(px) < 2 * self.k * self.n:
            raise ContractError(
                f"{len(px)} probes give fewer residuals than the {4 * self.k * self.n} "
                "keypoint unknowns"
            )
        self.sample_pixels = px
        r, c = px[:, 0], px[:, 1]
        self._points = grid.lattice()[r, c]
        self._target = self.target.coords[r, c]
        self._weights = self.contribs[:, r, c][..., None]

    @property
    def n_params(self) -> int:
        return 4 * self.k * self.n + (6 if self.fit_bg else 0)

    @property
    def n_residuals(self) -> int:
        return 2 * len(self.sample_pixels)

    def pack(self, driving: ArrayLike, source: ArrayLike, bg: Optional[AffineTransform] = None):
        shape = (self.k, self.n, 2)
        d = np.asarray(driving, dtype=np.float64)
        s = np.asarray(source, dtype=np.float64)
        if d.shape != shape or s.shape != shape:
            raise ContractError(f"keypoints must have shape {shape}, got {d.shape} and {s.shape}")
        parts = [d.ravel(), s.ravel()]
        if self.fit_bg:
            parts.append((bg or self.bg).matrix.ravel())
        return np.concatenate(parts)

    def unpack(self, x: ArrayLike):
        """Split a parameter vector into ``(driving, source, bg)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got shape {x.shape}")
        m = self.k * self.n * 2
        driving = x[:m].reshape(self.k, self.n, 2)
        source = x[m : 2 * m].reshape(self.k, self.n, 2)
        bg = AffineTransform.from_flat(x[2 * m :]) if self.fit_bg else self.bg
        return driving, source, bg

    def _owner(self, j: int) -> int:
        """Index of the blended term (0 = background) that parameter ``j`` feeds."""
        m = self.k * self.n * 2
        if j >= 2 * m:
            return 0
        return (j % m) // (2 * self.n) + 1

    def _terms(self, x) -> Optional[list]:
        driving, source, bg = self.unpack(x)
        terms = [self._weights[0] * apply_affine(bg, self._points)]
        for k in range(self.k):
            term = self._tps_term(driving, source, k)
            if term is None:
                return None
            terms.append(term)
        return terms

    def _tps_term(self, driving, source, k):
        try:
            t = solve_tps(driving[k], source[k])
        except DegenerateError:
            return None
        return self._weights[k + 1] * apply_tps(t, self._points)

    def _residual_from_terms(self, terms) -> NDArray[np.float64]:
        if terms is None:
            return np.full(self.n_residuals, np.inf)
        total = terms[0].copy()
        for t in terms[1:]:
            total += t
        return (total - self._target).ravel()


def flow_residual(x: ArrayLike, problem: FitProblem) -> NDArray[np.float64]:
    """Forward-model flow minus target at every probe, flattened as ``(dx, dy)`` pairs.

    A candidate whose keypoints make any TPS degenerate yields a vector of
    ``inf`` instead of raising; callers test ``np.isfinite``.
    """
    return problem._residual_from_terms(problem._terms(x))


def numeric_jacobian(x: ArrayLike, problem: FitProblem, step: float = 1e-5) -> NDArray[np.float64]:
    """Central-difference Jacobian of :func:`flow_residual`, shape ``(n_residuals, n_params)``.

    Perturbing one coordinate only changes the term of the transform that owns
    it, so only that term is recomputed; the blended sum is then formed in the
    same order as :func:`flow_residual`.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    base = problem._terms(x)
    jac = np.empty((problem.n_residuals, problem.n_params))
    if base is None:
        jac.fill(np.nan)
        return jac
    for j in range(problem.n_params):
        owner = problem._owner(j)
        cols = []
        for sign in (1.0, -1.0):
            xp = x.copy()
            xp[j] += sign * step
            driving, source, bg = problem.unpack(xp)
            terms = list(base)
            if owner == 0:
                terms[0] = problem._weights[0] * apply_affine(bg, problem._points)
            else:
                terms[owner] = problem._tps_term(driving, source, owner - 1)
                if terms[owner] is None:
                    terms = None
            cols.append(problem._residual_from_terms(terms))
        jac[:, j] = (cols[0] - cols[1]) / (2.0 * step)
    return jac


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 100
    damping: float = 1e-3
    tol: float = 1e-10
    damping_cap: float = 1e8
    fd_step: float = 1e-5


@dataclass
class FitReport:
    driving: NDArray[np.float64]
    source: NDArray[np.float64]
    bg: AffineTransform
    residual_rms: float
    iterations: int
    converged: bool
    damping_final: float
    reason: str
    history: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "residual_rms": self.residual_rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "damping_final": self.damping_final,
            "reason": self.reason,
            "history": list(self.history),
            "driving": self.driving.tolist(),
            "source": self.source.tolist(),
            "bg": self.bg.matrix.ravel().tolist(),
        }


InitLike = Union[ArrayLike, Sequence]


def _rms(cost: float, m: int) -> float:
    return float(np.sqrt(cost / m))


def fit_keypoints(problem: FitProblem, init: InitLike, config: FitConfig = FitConfig()) -> FitReport:
    """Levenberg-Marquardt on the keypoint parameters.

    ``init`` is either a packed parameter vector or a ``(driving, source)``
    pair. Each iteration forms one Jacobian, then retries the damped step
    (damping x10) until the cost strictly drops, after which damping is
    divided by 10. Stops on ``residual_rms < tol`` or ``|step| < tol``
    (converged), ``max_iter`` or the damping cap (not converged).
    """
    if isinstance(init, (tuple, list)):
        x = problem.pack(*init)
    else:
        x = np.array(init, dtype=np.float64)
    r = flow_residual(x, problem)
    if not np.all(np.isfinite(r)):
        raise DegenerateError("initial keypoints make a TPS degenerate")

    m = problem.n_residuals
    cost = float(r @ r)
    lam = config.damping
    history = [_rms(cost, m)]
    iterations = 0
    converged, reason = False, "max_iter"
    eye = np.eye(problem.n_params)

    while True:
        if _rms(cost, m) < config.tol:
            converged, reason = True, "residual"
            break
        if iterations >= config.max_iter:
            break
        jac = numeric_jacobian(x, problem, config.fd_step)
        if not np.all(np.isfinite(jac)):
            reason = "non-finite Jacobian"
            break
        iterations += 1
        accepted = False
        while lam <= config.damping_cap:
            # augmented least squares avoids squaring the condition of J
            a = np.vstack([jac, np.sqrt(lam) * eye])
            b = np.concatenate([-r, np.zeros(problem.n_params)])
            step = np.linalg.lstsq(a, b, rcond=None)[0]
            r_new = flow_residual(x + step, problem)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= DAMPING_UP
        if not accepted:
            reason = "all steps rejected at the damping cap"
            break
        x, r, cost = x + step, r_new, cost_new
        lam = max(lam / DAMPING_DOWN, DAMPING_FLOOR)
        history.append(_rms(cost, m))
        if np.linalg.norm(step) < config.tol:
            converged, reason = True, "step"
            break

    driving, source, bg = problem.unpack(x)
    return FitReport(
        driving=driving.copy(),
        source=source.copy(),
        bg=bg,
        residual_rms=_rms(cost, m),
        iterations=iterations,
        converged=converged,
        damping_final=lam,
        reason=reason,
        history=history,
    )


def grid_init(k: int, n: int, radius: float = 0.15):
    """A fixed non-degenerate layout: K rings of N points, identical in both frames."""
    side = int(np.ceil(np.sqrt(k)))
    ticks = np.linspace(-0.6, 0.6, side) if side > 1 else np.zeros(1)
    cx, cy = np.meshgrid(ticks, ticks)
    centres = np.column_stack([cx.ravel(), cy.ravel()])[:k]
    ang = 2 * np.pi * np.arange(n) / n
    ring = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    driving = centres[:, None, :] + ring[None]
    return driving, driving.copy()


def planted_problem(
    k: int = 2,
    n: int = 5,
    size: int = 64,
    seed: int = 0,
    jitter: float = 0.05,
    sigma: float = 0.3,
    fit_bg: bool = False,
    full_grid: bool = False,
):
    """A synthetic problem whose generating keypoints are known.

    Driving keypoints are drawn in ``[-0.8, 0.8]^2``; source keypoints are a
    mild random affine image of them plus uniform ``jitter``, so the flow is
    smooth. Returns ``(problem, truth)`` with ``truth`` the packed vector.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = SamplingGrid(size, size)
    driving = np.stack([random_nondegenerate_points(rng, n, -0.8, 0.8, 0.15) for _ in range(k)])
    lin = np.eye(2) + rng.uniform(-0.05, 0.05, size=(k, 2, 2))
    shift = rng.uniform(-0.05, 0.05, size=(k, 1, 2))
    source = np.einsum("kij,knj->kni", lin, driving) + shift
    source += rng.uniform(-jitter, jitter, size=source.shape)
    bg = AffineTransform(
        np.hstack([np.eye(2) + rng.uniform(-0.02, 0.02, (2, 2)), rng.uniform(-0.02, 0.02, (2, 1))])
    )
    contribs = softmax_contributions(synthetic_logits(driving, grid, sigma))
    tps = [solve_tps(driving[i], source[i]) for i in range(k)]
    target = combine_flows(tps, bg, contribs, grid)
    problem = FitProblem(
        target,
        k,
        n,
        contribs,
        bg=bg,
        fit_bg=fit_bg,
        sample_pixels=probe_pixels(grid, full=full_grid),
    )
    return problem, problem.pack(driving, source, bg)
