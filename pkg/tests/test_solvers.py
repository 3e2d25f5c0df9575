import math

import numpy as np
import pytest

from robust_tucker.losses import LossSpec, drho
from robust_tucker.riemannian import StepSchedule
from robust_tucker.solvers import (
    DivergenceError,
    ObservationSet,
    SolverConfig,
    complete_sample_split,
    completion_config,
    estimate_signal_diagnostics,
    rsgrad,
    rsgrad_quantile_trim,
    sample_loss,
    sparse_subgradient,
    trim,
    trun,
)
from robust_tucker.synth import perturb_factors
from robust_tucker.tensor_core import ShapeError, TuckerFactors

from conftest import random_tucker


def rel_err(F, T):
    return np.linalg.norm((F.full() - T).ravel()) / np.linalg.norm(T.ravel())


@pytest.fixture
def truth(rng):
    return random_tucker(rng, (12, 11, 10), (2, 3, 2), scale=10.0)


class TestTruncation:
    def test_trun_is_band_clip(self, rng):
        for _ in range(20):
            T, B = rng.standard_normal((4, 5, 3)) * 3, rng.standard_normal((4, 5, 3))
            tau = float(rng.uniform(0, 2))
            np.testing.assert_array_equal(trun(T, B, tau), np.clip(T, B - tau, B + tau))

    def test_trim_is_symmetric_clip(self, rng):
        for _ in range(20):
            T = rng.standard_t(2, size=(6, 4, 5))
            tau2 = float(rng.uniform(0.1, 5))
            level = math.sqrt(tau2 / T.size) * np.linalg.norm(T.ravel())
            np.testing.assert_array_equal(trim(T, tau2), np.clip(T, -level, level))

    def test_direct_values(self):
        assert trun(np.array([2.5]), np.zeros(1), 1.0)[0] == 1.0
        T = np.zeros(8)
        T[3] = 10.0
        assert trim(T.reshape(2, 2, 2), 2.0).ravel()[3] == 5.0

    def test_slack_thresholds_leave_input(self, rng):
        T = rng.standard_normal((3, 4, 2))
        np.testing.assert_array_equal(trun(T, T + 0.1, 0.2), T)
        np.testing.assert_array_equal(trim(T, T.size), T)

    def test_zero_thresholds(self, rng):
        T, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        np.testing.assert_array_equal(trun(T, B, 0.0), B)
        assert not np.any(trim(T, 0.0))

    def test_rejects(self, rng):
        with pytest.raises(ShapeError):
            trun(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)
        with pytest.raises(ValueError):
            trun(np.zeros(2), np.zeros(2), -1.0)
        with pytest.raises(ValueError):
            trim(np.zeros(2), -1.0)


class TestDiagnostics:
    def test_superdiagonal_core(self):
        core = np.zeros((3, 3, 3))
        for i, v in enumerate([3.0, 2.0, 1.0]):
            core[i, i, i] = v
        U = np.eye(5)[:, :3]
        d = estimate_signal_diagnostics(TuckerFactors(core, (U, U, U)))
        assert d["lambda_min"] == pytest.approx(1.0)
        assert d["lambda_max"] == pytest.approx(3.0)
        assert d["kappa"] == pytest.approx(3.0)
        # canonical basis vectors are maximally coherent: mu = 5/3
        assert d["mu"] == pytest.approx(5 / 3)

    def test_dense_matches_factors(self, truth):
        a = estimate_signal_diagnostics(truth)
        b = estimate_signal_diagnostics(truth.full(), truth.ranks)
        for key in a:
            assert b[key] == pytest.approx(a[key], rel=1e-8)

    def test_zero_tensor(self):
        with pytest.raises(ZeroDivisionError):
            estimate_signal_diagnostics(np.zeros((3, 3, 3)), (1, 1, 1))


class TestRsgrad:
    def test_square_loss_noiseless_recovery(self, truth):
        T = truth.full()
        start = perturb_factors(truth, 0.3, seed=1)
        F, trace = rsgrad(T, SolverConfig(LossSpec.square(), truth.ranks, max_iters=200), start, truth=T)
        assert rel_err(F, T) < 1e-8
        assert trace.switch_iter == 0
        assert np.all(np.diff(trace.column("loss")) <= 1e-9 * trace.column("loss")[0])

    def test_absolute_loss_rejects_sparse_outliers(self, rng, truth):
        T = truth.full()
        S = np.where(rng.random(T.shape) < 0.02, 50.0 * np.abs(T).max(), 0.0)
        start = perturb_factors(truth, 0.3, seed=2)
        cfg = SolverConfig(LossSpec.absolute(), truth.ranks, StepSchedule(q=0.9), max_iters=300)
        F, _ = rsgrad(T + S, cfg, start)
        assert rel_err(F, T) < 1e-4

    def test_phase_one_decays_geometrically(self, truth):
        T = truth.full()
        start = perturb_factors(truth, 0.5, seed=3)
        cfg = SolverConfig(LossSpec.absolute(), truth.ranks, StepSchedule(q=0.85, switch_at=1000), max_iters=60)
        _, trace = rsgrad(T, cfg, start, truth=T)
        err = trace.column("err_fro")
        slope = np.polyfit(np.arange(len(err)), np.log(err), 1)[0]
        assert slope < 0
        assert err[-1] < 1e-2 * err[0]
        assert np.all(trace.column("phase") == 1)

    def test_fixed_switch_and_steps(self, truth):
        T = truth.full()
        sched = StepSchedule(eta0=1.0, q=0.5, eta_const=0.01, switch_at=4)
        cfg = SolverConfig(LossSpec.absolute(), truth.ranks, sched, max_iters=8, tol=0.0)
        _, trace = rsgrad(T + 0.1, cfg, perturb_factors(truth, 0.2, seed=4))
        eta = trace.column("eta")
        np.testing.assert_allclose(eta[:4], [1.0, 0.5, 0.25, 0.125])
        np.testing.assert_allclose(eta[4:8], 0.01)
        assert math.isnan(eta[-1])
        assert trace.switch_iter == 4
        assert trace.stop_reason == "max_iters"
        assert len(trace) == 9

    def test_gradient_step_descends(self, rng, truth):
        from robust_tucker.losses import loss_value, vanilla_gradient
        from robust_tucker.riemannian import retract_efficient, tangent_project

        T = truth.full()
        Y = T + 0.1 * rng.standard_normal(T.shape)
        F = perturb_factors(truth, 0.3, seed=8)
        for spec in (LossSpec.square(), LossSpec.pseudo_huber(0.05), LossSpec.absolute()):
            base = loss_value(F.full(), Y, spec)
            tv = tangent_project(F, vanilla_gradient(F.full(), Y, spec))
            trial = [loss_value(retract_efficient(F, tv, eta).full(), Y, spec) for eta in 10.0 ** -np.arange(1, 7)]
            assert min(trial) < base

    def test_untrimmed_quantile_matches_rsgrad(self, rng, truth):
        T = truth.full()
        Y = T + 0.05 * rng.standard_normal(T.shape)
        cfg = SolverConfig(LossSpec.absolute(), truth.ranks, max_iters=40)
        start = perturb_factors(truth, 0.3, seed=9)
        a, ta = rsgrad(Y, cfg, start)
        b, tb = rsgrad_quantile_trim(Y, cfg, start)
        np.testing.assert_array_equal(a.full(), b.full())
        assert ta.to_csv() == tb.to_csv()

    def test_exact_start_stops_on_tolerance(self, truth):
        T = truth.full()
        _, trace = rsgrad(T, SolverConfig(LossSpec.square(), truth.ranks), truth)
        assert trace.stop_reason == "tolerance"
        assert len(trace) <= 2

    def test_divergence(self, truth):
        T = truth.full()
        cfg = SolverConfig(LossSpec.absolute(), truth.ranks, StepSchedule(eta0=1e6, switch_at=1000), max_iters=10)
        with pytest.raises(DivergenceError) as exc:
            rsgrad(T, cfg, perturb_factors(truth, 0.1, seed=5))
        assert exc.value.trace.stop_reason == "diverged"

    def test_rank_mismatch(self, truth):
        with pytest.raises(ShapeError):
            rsgrad(truth.full(), SolverConfig(LossSpec.square(), (1, 1, 1)), truth)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(LossSpec.square(), (1,), max_iters=0)
        with pytest.raises(ValueError):
            SolverConfig(LossSpec.square(), (1,), tau1=-1.0)


class TestTrace:
    def test_csv_columns(self, truth):
        T = truth.full()
        cfg = SolverConfig(LossSpec.square(), truth.ranks, max_iters=3, tol=0.0)
        _, with_truth = rsgrad(T + 0.01, cfg, truth, truth=T)
        _, without = rsgrad(T + 0.01, cfg, truth)
        assert with_truth.to_csv().splitlines()[0] == "iter,phase,eta,loss,pgrad_fro,err_fro,err_sup,mu"
        lines = without.to_csv().splitlines()
        assert lines[0] == "iter,phase,eta,loss,pgrad_fro"
        assert len(lines) == 1 + len(without)
        # floats are written so that they parse back exactly
        assert float(lines[1].split(",")[3]) == without.records[0].loss


class TestQuantileTrim:
    def test_requires_quantile(self, truth):
        with pytest.raises(ValueError):
            rsgrad_quantile_trim(truth.full(), SolverConfig(LossSpec.square(), truth.ranks), truth)

    def test_thresholds_estimated_at_switch(self, rng, truth):
        T = truth.full()
        Y = T + 0.01 * rng.standard_normal(T.shape)
        cfg = SolverConfig(
            LossSpec.absolute(), truth.ranks, StepSchedule(q=0.9), max_iters=100, enable_trim=True
        )
        F, trace = rsgrad_quantile_trim(Y, cfg, perturb_factors(truth, 0.3, seed=6))
        assert trace.tau1 > 0 and trace.tau2 > 0
        assert rel_err(F, T) < 0.01

    def test_explicit_thresholds(self, truth):
        T = truth.full()
        cfg = SolverConfig(
            LossSpec.absolute(), truth.ranks, StepSchedule(switch_at=2), max_iters=4,
            enable_trim=True, tau1=1.0, tau2=1000.0,
        )
        _, trace = rsgrad_quantile_trim(T + 0.01, cfg, truth)
        assert (trace.tau1, trace.tau2) == (1.0, 1000.0)


class TestObservationSet:
    def test_from_arrays_drops_remainder(self, rng):
        idx = rng.integers(0, 3, size=(11, 2))
        obs, dropped = ObservationSet.from_arrays(idx, np.arange(11.0), (3, 3), 3)
        assert (obs.fold_size, dropped) == (3, 2)
        np.testing.assert_array_equal(obs.fold(2)[1], [6.0, 7.0, 8.0])

    def test_validation(self):
        with pytest.raises(ShapeError):
            ObservationSet(np.array([[0, 3]]), np.array([1.0]), (3, 3), 1, 1)
        with pytest.raises(ShapeError):
            ObservationSet(np.array([[0, 0, 0]]), np.array([1.0]), (3, 3), 1, 1)
        with pytest.raises(ValueError):
            ObservationSet(np.zeros((3, 2)), np.zeros(3), (3, 3), 2, 2)
        with pytest.raises(ValueError):
            ObservationSet.from_arrays(np.zeros((1, 2)), np.zeros(1), (3, 3), 2)
        obs = ObservationSet(np.zeros((2, 2)), np.zeros(2), (3, 3), 1, 2)
        with pytest.raises(IndexError):
            obs.fold(2)


class TestSparseSubgradient:
    def test_duplicates_accumulate(self, rng):
        T = rng.standard_normal((4, 3))
        flat = np.array([0, 5, 5, 11, 0, 0])
        vals = rng.standard_normal(6)
        spec = LossSpec.pseudo_huber(0.7)
        G = sparse_subgradient(T, flat, vals, spec, scale=2.0)
        oracle = np.zeros(12)
        for f, v in zip(flat, vals):
            oracle[f] += 2.0 * float(drho(spec, T.ravel()[f] - v))
        np.testing.assert_allclose(G.ravel(), oracle, atol=1e-14)
        assert sample_loss(T, flat, vals, LossSpec.absolute()) == pytest.approx(
            sum(abs(T.ravel()[f] - v) for f, v in zip(flat, vals))
        )


class TestCompletion:
    @pytest.fixture
    def obs(self, rng, truth):
        T = truth.full()
        idx = np.stack([rng.integers(0, d, size=5 * 300) for d in truth.dims], axis=1)
        return ObservationSet(idx, T[tuple(idx.T)], truth.dims, 300, 5)

    def test_truth_is_fixed_point(self, obs, truth):
        F, trace = complete_sample_split(obs, truth.dims, completion_config(truth.ranks), truth, truth=truth.full())
        assert len(trace) == obs.n_folds
        assert trace.stop_reason == "folds exhausted"
        assert rel_err(F, truth.full()) < 1e-12

    def test_improves_on_start(self, rng, truth):
        T = truth.full()
        idx = np.stack([rng.integers(0, d, size=10 * 600) for d in truth.dims], axis=1)
        obs = ObservationSet(idx, T[tuple(idx.T)], truth.dims, 600, 10)
        start = perturb_factors(truth, 0.3, seed=7)
        F, _ = complete_sample_split(obs, truth.dims, completion_config(truth.ranks), start)
        assert rel_err(F, truth.full()) < 0.5 * rel_err(start, truth.full())

    def test_rejects(self, obs, truth):
        with pytest.raises(ShapeError):
            complete_sample_split(obs, (12, 11, 9), completion_config(truth.ranks), truth)
        one = ObservationSet(obs.indices[:300], obs.values[:300], obs.dims, 300, 1)
        with pytest.raises(ValueError):
            complete_sample_split(one, truth.dims, completion_config(truth.ranks), truth)
