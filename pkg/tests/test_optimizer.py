import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellfit import optimizer
from cellfit.optimizer import LMAbort, LMOptions, fd_jacobian, lm_solve, relative_error_report

INF = np.full(2, np.inf)


def rosenbrock(c):
    return np.array([1.0 - c[0], 10.0 * (c[1] - c[0] ** 2)])


class Counting:
    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, c):
        self.calls.append(np.array(c, dtype=float))
        return self.fn(c)


class TestFDJacobian:
    def test_analytic(self):
        jac, flagged, nfev = fd_jacobian(lambda c: np.array([c[0] ** 2, c[1]]), [1.0, 1.0], h=1e-6)
        assert np.allclose(jac, [[2, 0], [0, 1]], atol=1e-5)
        assert flagged == [] and nfev == 3

    def test_scale_changes_only_the_step(self):
        fn = Counting(lambda c: np.array([c[0] ** 2, c[1]]))
        j1, _, _ = fd_jacobian(fn, [1.0, 1.0], scale=[1.0, 1.0], h=1e-6)
        fn.calls.clear()
        j2, _, _ = fd_jacobian(fn, [1.0, 1.0], scale=[10.0, 1.0], h=1e-6)
        assert fn.calls[1][0] - 1.0 == pytest.approx(1e-5, rel=1e-9)
        assert np.allclose(j1, j2, atol=2e-5)

    def test_backward_at_upper_bound(self):
        fn = Counting(lambda c: np.array([c[0] ** 2, c[1]]))
        jac, _, _ = fd_jacobian(fn, [1.0, 1.0], h=1e-6, upper=[1.0, 5.0], lower=[0.0, 0.0])
        assert fn.calls[1][0] < 1.0
        assert jac[0, 0] == pytest.approx(2.0, abs=1e-5)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_forward_difference_is_first_order(self, seed):
        # oracle: central differences with a step 100 times smaller
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(5, 3))
        B = rng.normal(size=(5, 3))
        c0 = rng.uniform(-1, 1, 3)

        def fn(c):
            return np.sin(A @ c) + (B @ c) ** 2

        errs = []
        for h in (1e-2, 5e-3, 2.5e-3):
            jac, _, _ = fd_jacobian(fn, c0, h=h)
            ref, _, _ = fd_jacobian(fn, c0, h=h / 100, central=True)
            errs.append(np.max(np.abs(jac - ref)))
        assert errs[0] < 50 * 1e-2
        # halving h roughly halves the error
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 1.6) & (ratios < 2.5))

    def test_failed_columns_flagged(self):
        def fn(c):
            return np.full(2, 1e10) if c[2] > 1.0 else np.array([c[0], c[1] + c[2]])

        jac, flagged, _ = fd_jacobian(fn, [1.0, 1.0, 1.0], h=1e-3)
        assert flagged == [2]
        assert np.all(jac[:, 2] == 0)

    def test_majority_failure_aborts(self):
        def fn(c):
            return np.full(2, 1e10) if c[0] > 1.0 or c[1] > 1.0 else np.array([c[0], c[1]])

        with pytest.raises(LMAbort):
            fd_jacobian(fn, [1.0, 1.0, 1.0], h=1e-3)


class TestLMStep:
    def test_large_mu_is_steepest_descent(self):
        rng = np.random.default_rng(0)
        jac = rng.normal(size=(6, 3))
        chi = rng.normal(size=6)
        d = optimizer.lm_step(jac, chi, 1e8)
        g = -jac.T @ chi
        assert d @ g / (np.linalg.norm(d) * np.linalg.norm(g)) > 1 - 1e-6

    def test_zero_mu_is_gauss_newton(self):
        rng = np.random.default_rng(1)
        jac = rng.normal(size=(6, 3))
        chi = rng.normal(size=6)
        ref = np.linalg.lstsq(jac, -chi, rcond=None)[0]
        assert np.allclose(optimizer.lm_step(jac, chi, 0.0), ref)


class TestLMSolve:
    def test_rosenbrock(self):
        res = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
        assert np.allclose(res.c, [1.0, 1.0], atol=1e-6)
        assert res.converged

    def test_linear_least_squares(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(8, 3))
        b = rng.normal(size=8)
        opts = LMOptions(fd_step=1e-7)
        res = lm_solve(lambda c: A @ c - b, [1.0, 1.0, 1.0], np.full(3, -1e3), np.full(3, 1e3), opts)
        ref = np.linalg.lstsq(A, b, rcond=None)[0]
        assert np.allclose(res.c, ref, atol=1e-5)
        assert res.n_iterations <= 3
        assert res.termination in ("small_gradient", "small_error", "small_update")

    def test_monotone_and_feasible(self):
        fn = Counting(rosenbrock)
        lo, hi = np.array([-2.0, -0.5]), np.array([0.9, 3.0])
        res = lm_solve(fn, [-1.2, 1.0], lo, hi)
        assert np.all(np.diff(res.accepted_values()) <= 0)
        for c in fn.calls:
            assert np.all(c >= lo) and np.all(c <= hi)
        # constrained optimum sits on the bound c1 = 0.9
        assert res.c[0] == pytest.approx(0.9)

    def test_nfev_counts_every_call(self):
        fn = Counting(rosenbrock)
        res = lm_solve(fn, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
        assert res.nfev == len(fn.calls)
        trials = sum(1 for it in res.iterates[1:])
        assert res.nfev == 1 + trials + 2 * res.n_jacobians

    def test_start_at_solution(self):
        res = lm_solve(rosenbrock, [1.0, 1.0], [-5.0, -5.0], [5.0, 5.0])
        assert res.termination == "small_error"
        assert res.n_iterations == 0 and res.nfev == 1

    def test_deterministic(self):
        r1 = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
        r2 = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
        assert np.array_equal(r1.c, r2.c) and r1.nfev == r2.nfev

    def test_max_iterations(self):
        res = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0], LMOptions(max_iterations=2))
        assert res.termination == "max_iterations" and not res.converged

    def test_failed_trials_are_rejected(self):
        def fn(c):
            return np.full(2, 1e10) if c[0] > 0.5 else rosenbrock(c)

        res = lm_solve(fn, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
        assert res.c[0] <= 0.5
        assert np.all(np.diff(res.accepted_values()) <= 0)

    def test_initial_failure_aborts(self):
        with pytest.raises(LMAbort):
            lm_solve(lambda c: np.full(2, 1e10), [0.0, 0.0], [-1.0, -1.0], [1.0, 1.0])

    @pytest.mark.parametrize("c0,lo,hi", [([2.0, 0.0], [-1, -1], [1, 1]), ([0.0, 0.0], [1, -1], [0, 1])])
    def test_bad_box(self, c0, lo, hi):
        with pytest.raises(ValueError):
            lm_solve(rosenbrock, c0, lo, hi)

    def test_provided_values_scaling(self):
        opts = LMOptions(scaling_reference="provided_values")
        with pytest.raises(ValueError):
            lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0], opts)
        res = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0], opts, scale=[1.0, 1.0],
                       c_true=[1.0, 1.0])
        assert res.relative_errors[0]["error"] < 1e-4


class TestRelativeErrors:
    def test_examples(self):
        assert [e["error"] for e in relative_error_report([1.0, 2.0], [1.0, 2.0])] == [0.0, 0.0]
        assert relative_error_report([1.25], [1.0])[0]["error"] == pytest.approx(25.0)
        assert relative_error_report([9.68e-3], [1e-2])[0]["error"] == pytest.approx(3.2)

    def test_zero_truth_absolute(self):
        e = relative_error_report([0.3], [0.0])[0]
        assert e["absolute"] and e["error"] == pytest.approx(0.3)


def test_trace_csv(tmp_path):
    res = lm_solve(rosenbrock, [-1.2, 1.0], [-5.0, -5.0], [5.0, 5.0])
    optimizer.write_trace_csv(tmp_path / "trace.csv", res, ["x", "y"])
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].split(",")[-2:] == ["x", "y"]
    assert len(lines) == len(res.iterates) + 1
