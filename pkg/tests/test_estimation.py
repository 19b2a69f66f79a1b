import numpy as np
import pytest

from tpsmotion.errors import ContractError
from tpsmotion.estimation import (
    FitConfig,
    FitProblem,
    fit_keypoints,
    flow_residual,
    grid_init,
    numeric_jacobian,
    planted_problem,
    probe_pixels,
)
from tpsmotion.geometry import AffineTransform, solve_tps, tps_jacobian
from tpsmotion.motion import SamplingGrid, combine_flows, identity_grid, softmax_contributions


@pytest.fixture(scope="module")
def planted():
    return planted_problem(k=2, n=5, size=32, seed=3)


def identity_problem(k=2, n=5, size=24):
    grid = SamplingGrid(size, size)
    contribs = softmax_contributions(np.zeros((k + 1, size, size)))
    return FitProblem(identity_grid(grid), k, n, contribs)


class TestProbes:
    def test_default_subgrid(self):
        px = probe_pixels(SamplingGrid(64, 48))
        assert px.shape == (256, 2)
        assert px[:, 0].max() == 63 and px[:, 1].max() == 47

    def test_small_grid_and_full(self):
        assert len(probe_pixels(SamplingGrid(5, 6))) == 30
        assert len(probe_pixels(SamplingGrid(5, 6), full=True)) == 30


class TestResidual:
    def test_truth_is_zero(self, planted):
        problem, truth = planted
        assert np.max(np.abs(flow_residual(truth, problem))) < 1e-8

    def test_identity_candidate(self):
        problem = identity_problem()
        d, s = grid_init(2, 5)
        assert np.max(np.abs(flow_residual(problem.pack(d, s), problem))) < 1e-10

    def test_matches_forward_model(self, planted, rng):
        problem, truth = planted
        x = truth + rng.uniform(-0.05, 0.05, truth.shape)
        driving, source, bg = problem.unpack(x)
        tps = [solve_tps(driving[k], source[k]) for k in range(problem.k)]
        full = combine_flows(tps, bg, problem.contribs, problem.target.grid).coords
        r, c = problem.sample_pixels.T
        expected = (full[r, c] - problem.target.coords[r, c]).ravel()
        np.testing.assert_allclose(flow_residual(x, problem), expected, atol=1e-13)

    def test_degenerate_candidate_is_flagged(self, planted):
        problem, truth = planted
        driving, source, _ = problem.unpack(truth)
        driving = driving.copy()
        driving[0] = np.column_stack([np.linspace(-0.5, 0.5, 5)] * 2)
        r = flow_residual(problem.pack(driving, source), problem)
        assert r.shape == (problem.n_residuals,) and np.all(np.isinf(r))

    def test_pack_round_trip(self, planted):
        problem, truth = planted
        np.testing.assert_array_equal(problem.pack(*problem.unpack(truth)[:2]), truth)

    def test_contracts(self):
        grid = SamplingGrid(8, 8)
        with pytest.raises(ContractError):
            FitProblem(identity_grid(grid), 2, 5, np.zeros((2, 8, 8)))
        with pytest.raises(ContractError, match="fewer residuals"):
            FitProblem(identity_grid(grid), 2, 5, np.zeros((3, 8, 8)), sample_pixels=[[0, 0], [1, 1]])
        with pytest.raises(ContractError, match="on the target grid"):
            FitProblem(identity_grid(grid), 1, 3, np.zeros((2, 8, 8)), sample_pixels=[[9, 0]] * 6)


class TestJacobian:
    def test_frozen_transform_has_zero_columns(self, planted):
        problem, truth = planted
        contribs = problem.contribs.copy()
        contribs[0] += contribs[2]
        contribs[2] = 0.0
        frozen = FitProblem(problem.target, 2, 5, contribs, bg=problem.bg)
        jac = numeric_jacobian(truth, frozen)
        cols = [j for j in range(frozen.n_params) if frozen._owner(j) == 2]
        assert len(cols) == 20
        np.testing.assert_allclose(jac[:, cols], 0.0, atol=1e-8)

    def test_translation_sensitivity(self, planted, rng):
        problem, truth = planted
        x = truth + rng.uniform(-0.03, 0.03, truth.shape)
        jac = numeric_jacobian(x, problem).reshape(-1, 2, problem.n_params)
        driving, source, _ = problem.unpack(x)
        kn2 = problem.k * problem.n * 2
        r, c = problem.sample_pixels.T
        pts = problem.target.grid.lattice()[r, c]
        for k in range(problem.k):
            weight = problem.contribs[k + 1, r, c]
            xcols = np.arange(k * problem.n * 2, (k + 1) * problem.n * 2, 2)
            # moving every source keypoint by dx moves T_k by dx
            src = jac[:, :, kn2 + xcols].sum(axis=-1)
            np.testing.assert_allclose(src[:, 0], weight, atol=1e-6)
            np.testing.assert_allclose(src[:, 1], 0.0, atol=1e-6)
            # moving every driving keypoint by dx gives T_k(p - dx)
            grad = tps_jacobian(solve_tps(driving[k], source[k]), pts)[:, :, 0]
            drv = jac[:, :, xcols].sum(axis=-1)
            np.testing.assert_allclose(drv, -weight[:, None] * grad, atol=1e-6)

    def test_step_halving_ratio(self, planted, rng):
        problem, truth = planted
        x = truth + rng.uniform(-0.05, 0.05, truth.shape)
        j1, j2, j4 = (numeric_jacobian(x, problem, 1e-3 / d) for d in (1, 2, 4))
        ratio = np.linalg.norm(j1 - j2) / np.linalg.norm(j2 - j4)
        assert 3.5 <= ratio <= 4.5

    def test_stationary_at_truth(self, planted):
        problem, truth = planted
        g = numeric_jacobian(truth, problem).T @ flow_residual(truth, problem)
        assert np.linalg.norm(g) < 1e-6

    def test_bad_step(self, planted):
        with pytest.raises(ContractError):
            numeric_jacobian(planted[1], planted[0], 0.0)


class TestFit:
    def test_init_at_truth(self, planted):
        problem, truth = planted
        rep = fit_keypoints(problem, truth, FitConfig(tol=1e-8))
        assert rep.converged and rep.iterations <= 1 and rep.residual_rms < 1e-8

    def test_perturbed_recovery(self, planted, rng):
        problem, truth = planted
        rep = fit_keypoints(problem, truth + rng.uniform(-0.05, 0.05, truth.shape))
        assert rep.residual_rms < 1e-4 and rep.iterations <= 100
        assert all(b <= a for a, b in zip(rep.history, rep.history[1:]))

    def test_identity_target(self, rng):
        problem = identity_problem()
        d, s = grid_init(2, 5)
        rep = fit_keypoints(problem, (d + rng.uniform(-0.03, 0.03, d.shape), s))
        assert rep.residual_rms < 1e-6

    def test_free_background(self, rng):
        problem, truth = planted_problem(k=1, n=4, size=24, seed=5, fit_bg=True)
        rep = fit_keypoints(problem, truth + rng.uniform(-0.02, 0.02, truth.shape))
        assert rep.residual_rms < 1e-4
        assert isinstance(rep.bg, AffineTransform)

    def test_deterministic(self, planted):
        problem, truth = planted
        init = truth + np.random.default_rng(8).uniform(-0.05, 0.05, truth.shape)
        a, b = fit_keypoints(problem, init), fit_keypoints(problem, init)
        assert a.as_dict() == b.as_dict()

    def test_damping_cap_reports_instead_of_raising(self, planted):
        problem, truth = planted
        init = truth + np.random.default_rng(2).uniform(-0.05, 0.05, truth.shape)
        rep = fit_keypoints(problem, init, FitConfig(damping=1e-3, damping_cap=1e-4))
        assert not rep.converged and "rejected" in rep.reason

    def test_max_iter(self, planted):
        problem, truth = planted
        init = truth + np.random.default_rng(2).uniform(-0.05, 0.05, truth.shape)
        rep = fit_keypoints(problem, init, FitConfig(max_iter=1))
        assert rep.iterations == 1 and not rep.converged and rep.reason == "max_iter"
