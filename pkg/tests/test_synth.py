import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab.synth import (
    FREP_KINDS,
    SyntheticTask,
    TaskRepresentation,
    eval_frep,
    eval_fstar,
    eval_residual,
    holder_bound,
    make_task,
    sample_dataset,
)


def gauss_grid(d, nodes=48):
    """Tensor Gauss-Legendre rule on [0, 1]^d."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    t = (t + 1) / 2
    w = w / 2
    pts = np.array(list(itertools.product(t, repeat=d)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    return pts, wts


class TestMakeTask:
    def test_zero_kind(self):
        task = make_task(2, 3, 1.5, 0.1, 0.5, "zero", seed=1)
        assert task.v_star == (0.0, 0.0, 0.0)
        X = np.random.default_rng(0).uniform(size=(200, 2))
        np.testing.assert_array_equal(eval_frep(task, X), 0.0)
        np.testing.assert_allclose(eval_fstar(task, X), 0.5 * eval_residual(task, X), rtol=1e-15)

    def test_informative_no_residual(self):
        task = make_task(2, 4, 1.5, 0.1, 0.0, "informative-smooth", seed=3)
        X = np.random.default_rng(1).uniform(size=(1000, 2))
        diff = eval_fstar(task, X) - eval_frep(task, X) @ np.array(task.v_star)
        assert np.all(diff == 0.0)

    def test_deterministic(self):
        args = (3, 5, 2.5, 0.2, 0.4, "random-features", 17)
        assert make_task(*args).dumps() == make_task(*args).dumps()
        assert make_task(*args[:-1], 18).dumps() != make_task(*args).dumps()

    @pytest.mark.parametrize("beta", [1.0, 2.0, 0.0, -0.5])
    def test_rejects_bad_beta(self, beta):
        with pytest.raises(ValueError):
            make_task(1, 2, beta, 0.1, 0.1, "zero", 0)

    def test_rejects_bad_kind(self):
        with pytest.raises(ValueError):
            make_task(1, 2, 1.5, 0.1, 0.1, "nope", 0)

    def test_roundtrip(self):
        task = make_task(2, 3, 1.5, 0.3, 0.2, "adversarial-misaligned", 4)
        back = SyntheticTask.loads(task.dumps())
        assert back == task and back.task_id == task.task_id
        X = np.random.default_rng(0).uniform(size=(50, 2))
        np.testing.assert_array_equal(eval_fstar(back, X), eval_fstar(task, X))

    def test_joint_rescale(self):
        # |v*| = 1 plus a big constant residual cannot stay inside [-1, 1]
        task = make_task(1, 2, 1.5, 0.0, 1.0, "informative-smooth", 0, v_norm=1.0,
                         residual="const")
        assert task.scale == pytest.approx(0.5)
        assert task.rho_star == pytest.approx(0.5)
        assert np.linalg.norm(task.v_star) == pytest.approx(0.5)
        X = np.random.default_rng(0).uniform(size=(10000, 1))
        assert np.abs(eval_fstar(task, X)).max() <= 1.0


class TestEvaluation:
    def test_out_of_range(self):
        task = make_task(2, 2, 1.5, 0.1, 0.1, "zero", 0)
        with pytest.raises(ValueError):
            eval_fstar(task, [0.5, 1.2])
        with pytest.raises(ValueError):
            eval_frep(task, [0.5])

    def test_residual_bounded_sweep(self):
        task = make_task(2, 4, 1.5, 0.1, 0.3, "informative-smooth", 5)
        X = np.random.default_rng(2).uniform(size=(10_000, 2))
        resid = eval_fstar(task, X) - eval_frep(task, X) @ np.array(task.v_star)
        g0_max = np.abs(eval_residual(task, X)).max()
        assert np.abs(resid).max() <= 0.3 * g0_max + 1e-15
        assert 0.3 * g0_max <= 0.3

    @pytest.mark.parametrize("kind", FREP_KINDS)
    @pytest.mark.parametrize("d,p", [(1, 4), (2, 4), (3, 2)])
    def test_range_invariants(self, kind, d, p):
        task = make_task(d, p, 1.5, 0.3, 0.5, kind, seed=d * 10 + p)
        X = np.random.default_rng(7).uniform(size=(10_000, d))
        assert np.linalg.norm(eval_frep(task, X), axis=1).max() <= 1.0 + 1e-12
        assert np.abs(eval_fstar(task, X)).max() <= 1.0
        # corners too: the cosine features peak there
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=d)))
        assert np.linalg.norm(eval_frep(task, corners), axis=1).max() <= 1.0 + 1e-12
        assert np.abs(eval_fstar(task, corners)).max() <= 1.0

    @pytest.mark.parametrize("kind", FREP_KINDS)
    def test_residual_identity(self, kind):
        task = make_task(2, 3, 2.5, 0.2, 0.7, kind, 11)
        X = np.random.default_rng(3).uniform(size=(2000, 2))
        lhs = eval_fstar(task, X) - eval_frep(task, X) @ np.array(task.v_star)
        np.testing.assert_allclose(lhs, task.rho_star * eval_residual(task, X),
                                   rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["informative-smooth", "adversarial-misaligned"])
    @pytest.mark.parametrize("d,p", [(1, 4), (2, 4), (2, 6), (3, 3)])
    def test_probe_optimality_witness(self, kind, d, p):
        task = make_task(d, p, 1.5, 0.3, 0.5, kind, seed=d + p)
        pts, wts = gauss_grid(d, nodes=48 if d < 3 else 24)
        g0 = eval_residual(task, pts)
        F = eval_frep(task, pts)
        inner = wts @ (g0[:, None] * F)
        assert np.abs(inner).max() <= 1e-3
        # consequently the population LS probe equals v*
        gram = F.T @ (wts[:, None] * F)
        target = F.T @ (wts * eval_fstar(task, pts))
        v_ls = np.linalg.lstsq(gram, target, rcond=None)[0]
        if kind == "informative-smooth":
            np.testing.assert_allclose(v_ls, task.v_star, atol=1e-8)
        else:
            np.testing.assert_allclose(gram @ v_ls, 0.0, atol=1e-8)


class TestHolderBound:
    @pytest.mark.parametrize("omega,beta,d", [(math.pi, 1.5, 1), (math.pi, 0.5, 1),
                                               (3 * math.pi, 1.5, 1), (math.pi, 1.5, 2)])
    def test_dominates_grid_estimate(self, omega, beta, d):
        """Brute-force lower estimate of the Hölder norm on a grid."""
        m = math.floor(beta)
        alpha = beta - m
        if d == 1:
            x = np.linspace(0, 1, 2001)
            derivs = [np.cos(omega * x), -omega * np.sin(omega * x),
                      -omega ** 2 * np.cos(omega * x)]
            sup = max(np.abs(derivs[k]).max() for k in range(m + 1))
            top = derivs[m]
            diff = np.abs(top[:, None] - top[None, :])
            dist = np.abs(x[:, None] - x[None, :])
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(dist > 0, diff / dist ** alpha, 0.0)
            est = max(sup, q.max())
        else:
            x = np.linspace(0, 1, 61)
            X1, X2 = np.meshgrid(x, x, indexing="ij")
            gx = -omega * np.sin(omega * X1) * np.cos(omega * X2)
            pts = np.column_stack([X1.ravel(), X2.ravel()])
            vals = gx.ravel()
            dist = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(dist > 0, np.abs(vals[:, None] - vals[None, :]) / dist ** alpha, 0)
            est = max(omega, q.max())
        assert holder_bound(omega, beta, d) >= est

    def test_residual_unit_norm_scale(self):
        task = make_task(1, 2, 1.5, 0.1, 0.0, "zero", 0)
        assert task.residual_norm_const == pytest.approx(holder_bound(math.pi, 1.5, 1))
        X = np.linspace(0, 1, 101)[:, None]
        assert np.abs(eval_residual(task, X)).max() == pytest.approx(1 / task.residual_norm_const)


class TestSampleDataset:
    def test_noiseless(self):
        task = make_task(2, 3, 1.5, 0.0, 0.4, "random-features", 2)
        data = sample_dataset(task, 500, seed=9)
        np.testing.assert_array_equal(data.y, eval_fstar(task, data.X))
        np.testing.assert_allclose(data.F, eval_frep(task, data.X), rtol=0, atol=0)

    def test_noise_variance(self):
        task = make_task(1, 2, 1.5, 0.5, 0.3, "informative-smooth", 2)
        data = sample_dataset(task, 100_000, seed=1)
        var = np.var(data.y - eval_fstar(task, data.X), ddof=1)
        assert 0.24 <= var <= 0.26

    def test_deterministic(self):
        task = make_task(2, 3, 1.5, 0.3, 0.4, "informative-smooth", 2)
        a = sample_dataset(task, 50, 3)
        b = sample_dataset(task, 50, 3)
        assert a.dumps() == b.dumps()
        assert a.provenance["task_id"] == task.task_id

    def test_nested_in_n(self):
        task = make_task(2, 3, 1.5, 0.3, 0.4, "informative-smooth", 2)
        small = sample_dataset(task, 250, 5)
        big = sample_dataset(task, 4000, 5)
        np.testing.assert_array_equal(big.X[:250], small.X)
        # y differs only by BLAS blocking in F @ v
        np.testing.assert_allclose(big.y[:250], small.y, rtol=0, atol=1e-15)

    def test_rejects_empty(self):
        task = make_task(1, 1, 1.5, 0.3, 0.4, "zero", 2)
        with pytest.raises(ValueError):
            sample_dataset(task, 0, 1)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(FREP_KINDS),
           d=st.integers(1, 4))
    def test_points_in_cube(self, seed, kind, d):
        task = make_task(d, 3, 1.5, 0.3, 0.5, kind, seed)
        data = sample_dataset(task, 200, seed)
        assert data.X.min() >= 0 and data.X.max() <= 1


def test_task_representation():
    task = make_task(2, 3, 1.5, 0.3, 0.4, "informative-smooth", 2)
    rep = TaskRepresentation(task)
    X = np.random.default_rng(0).uniform(size=(5, 2))
    np.testing.assert_array_equal(rep(X), eval_frep(task, X))
    assert rep.p == 3 and rep.d == 2
