import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab.estimators import ProbeModel, ScratchModel
from refinelab.nnet import NetworkSpec, init_network
from refinelab.risk import (
    RiskEstimate,
    excess_risk,
    fit_rate_exponent,
    negative_transfer_gap,
)
from refinelab.synth import TaskRepresentation, eval_fstar, make_task, sample_dataset


class ConstantModel:
    def __init__(self, c):
        self.c = c

    def predict(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.c)


def random_model(d=2, seed=0):
    return ScratchModel(init_network(NetworkSpec(d, 8, 3, 3.0, clip=True), seed))


class TestExcessRisk:
    def test_perfect_probe(self):
        task = make_task(2, 3, 1.5, 0.3, 0.0, "informative-smooth", 1)
        est = excess_risk(ProbeModel(np.array(task.v_star), TaskRepresentation(task)), task,
                          10_000, 0)
        assert est.mean <= 1e-30 and est.stderr <= 1e-30

    def test_constant_fixture(self):
        task = make_task(1, 1, 1.5, 0.3, 0.5, "zero", 0, residual="const")
        est = excess_risk(ConstantModel(0.0), task, 1000, 0)
        assert est.mean == pytest.approx(0.25, abs=1e-15)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self):
        task = make_task(2, 3, 1.5, 0.3, 0.4, "random-features", 1)
        m = random_model()
        assert excess_risk(m, task, 5000, 3) == excess_risk(m, task, 5000, 3)
        assert excess_risk(m, task, 5000, 3).mean != excess_risk(m, task, 5000, 4).mean

    def test_clt_consistency(self):
        task = make_task(2, 3, 1.5, 0.3, 0.4, "random-features", 1)
        m = random_model(seed=5)
        big = excess_risk(m, task, 1_000_000, 1)
        small = excess_risk(m, task, 10_000, 2)
        assert abs(big.mean - small.mean) <= 4 * math.hypot(big.stderr, small.stderr)

    def test_noisy_identity(self):
        """E[(g - Y)^2] - sigma^2 on a noisy sample tracks the excess risk."""
        task = make_task(2, 3, 1.5, 0.4, 0.4, "informative-smooth", 2)
        m = random_model(seed=3)
        data = sample_dataset(task, 400_000, 9)
        sq = (m.predict(data.X) - data.y) ** 2
        noisy = sq.mean() - task.sigma ** 2
        noisy_se = sq.std(ddof=1) / math.sqrt(data.n)
        est = excess_risk(m, task, 400_000, 10)
        assert abs(noisy - est.mean) <= 4 * math.hypot(noisy_se, est.stderr)

    def test_blocks_match_one_shot(self):
        task = make_task(1, 2, 1.5, 0.3, 0.4, "informative-smooth", 2)
        m = random_model(d=1)
        est = excess_risk(m, task, 70_000, 4)
        rng = np.random.default_rng(4)
        X = np.vstack([rng.uniform(size=(65536, 1)), rng.uniform(size=(70_000 - 65536, 1))])
        sq = (m.predict(X) - eval_fstar(task, X)) ** 2
        assert est.mean == pytest.approx(sq.mean(), rel=1e-12)
        assert est.stderr == pytest.approx(sq.std(ddof=1) / math.sqrt(70_000), rel=1e-6)

    @pytest.mark.parametrize("n_mc", [0, -3, 2.5])
    def test_bad_n_mc(self, n_mc):
        task = make_task(1, 1, 1.5, 0.3, 0.5, "zero", 0)
        with pytest.raises(ValueError):
            excess_risk(ConstantModel(0.0), task, n_mc, 0)

    def test_single_sample(self):
        task = make_task(1, 1, 1.5, 0.3, 0.5, "zero", 0)
        est = excess_risk(ConstantModel(0.1), task, 1, 0)
        assert est.n_mc == 1 and est.stderr == 0.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(-1, 1))
    def test_nonnegative(self, seed, c):
        task = make_task(2, 2, 1.5, 0.3, 0.5, "random-features", seed % 1000)
        est = excess_risk(ConstantModel(c), task, 200, seed)
        assert est.mean >= 0 and est.stderr >= 0

    def test_record_invariants(self):
        with pytest.raises(ValueError):
            RiskEstimate(-1.0, 0.0, 10)
        with pytest.raises(ValueError):
            RiskEstimate(1.0, 0.0, 0)
        r = RiskEstimate(0.5, 0.1, 10, "t", "m")
        assert RiskEstimate.from_dict(r.to_dict()) == r


class TestRateFit:
    def test_exact_power_law(self):
        c = 0.37
        fit = fit_rate_exponent([(n, c * n ** (-2 / 3)) for n in (100, 400, 1600)])
        assert abs(fit.slope + 2 / 3) <= 1e-12
        assert fit.intercept == pytest.approx(math.log(c), abs=1e-12)
        assert fit.resid_se <= 1e-12

    def test_constant(self):
        assert fit_rate_exponent([(10, 0.2), (20, 0.2), (40, 0.2)]).slope == 0.0

    @settings(max_examples=50, deadline=None)
    @given(exp=st.floats(-3, 1), c=st.floats(1e-3, 1e3),
           ns=st.lists(st.integers(2, 10**6), min_size=3, max_size=8, unique=True))
    def test_power_law_recovered(self, exp, c, ns):
        ns = sorted(ns)
        fit = fit_rate_exponent([(n, c * n ** exp) for n in ns])
        assert abs(fit.slope - exp) <= 1e-9

    def test_multiplicative_noise(self):
        # simulation oracle: worst case over many noise draws stays in the window
        rng = np.random.default_rng(0)
        grid = [250, 500, 1000, 2000, 4000]
        slopes = [fit_rate_exponent([(n, n ** -1.0 * rng.uniform(0.9, 1.1)) for n in grid]).slope
                  for _ in range(2000)]
        assert -1.15 <= min(slopes) and max(slopes) <= -0.85

    @pytest.mark.parametrize("pts", [
        [(1, 0.1), (2, 0.05)],
        [(1, 0.1), (2, 0.0), (3, 0.01)],
        [(1, 0.1), (2, -0.1), (3, 0.01)],
        [(2, 0.1), (1, 0.05), (3, 0.01)],
    ])
    def test_errors(self, pts):
        with pytest.raises(ValueError):
            fit_rate_exponent(pts)


class TestGap:
    def test_single_cell(self):
        rep = negative_transfer_gap({("t", 0): {"refine": 0.10, "scratch": 0.12, "probe": 0.30}})
        assert rep.cells[0]["gap"] == pytest.approx(-0.02, abs=1e-15)
        assert rep.frac_positive == 0.0

    def test_refine_equals_scratch(self):
        grid = {(t, s): {"refine": 0.1 + s, "scratch": 0.1 + s, "probe": 0.5 + s}
                for t in "ab" for s in range(3)}
        rep = negative_transfer_gap(grid)
        assert all(c["gap"] <= 0 for c in rep.cells)

    def test_fixture_aggregates(self):
        # 3 tasks x 5 seeds with hand-computed means
        rng = np.random.default_rng(0)
        grid = {}
        for t in ("a", "b", "c"):
            for s in range(5):
                grid[(t, s)] = {e: round(float(rng.uniform(0.01, 0.2)), 3)
                                for e in ("refine", "scratch", "probe")}
        rep = negative_transfer_gap(grid, tolerance=0.01)
        gaps = [r["refine"] - min(r["scratch"], r["probe"]) for r in grid.values()]
        assert rep.mean_gap == pytest.approx(sum(gaps) / len(gaps), abs=1e-15)
        assert rep.frac_positive == pytest.approx(sum(g > 0.01 for g in gaps) / 15)
        assert rep.worst_cell["gap"] == pytest.approx(max(gaps))
        for row in rep.tasks:
            cells = [v for k, v in grid.items() if k[0] == row["task"]]
            for e in ("refine", "scratch", "probe"):
                assert row[e] == pytest.approx(sum(c[e] for c in cells) / 5, abs=1e-15)
            assert row["gap"] == pytest.approx(
                row["refine"] - min(row["scratch"], row["probe"]), abs=1e-15)

    def test_incomplete(self):
        with pytest.raises(ValueError):
            negative_transfer_gap({("t", 0): {"refine": 0.1, "scratch": 0.2}})
        with pytest.raises(ValueError):
            negative_transfer_gap({})
