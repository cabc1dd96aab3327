"""L-BFGS and AdamW solver behavior."""

import numpy as np
import pytest

from scenefit import autodiff as ad
from scenefit.optim import AdamwConfig, LbfgsConfig, adamw_minimize, lbfgs_minimize


def _pv(values):
    values = np.asarray(values, dtype=np.float64)
    return ad.ParamVector(values, ad.ParamLayout(segments=(("x", (values.size,)),)))


def rosenbrock(p):
    x = p["x"]
    a = x[1] - x[0] * x[0]
    b = 1.0 - x[0]
    return 100.0 * a * a + b * b


class TestLbfgs:
    def test_rosenbrock(self):
        res = lbfgs_minimize(rosenbrock, _pv([-1.2, 1.0]),
                             LbfgsConfig(max_iters=200, grad_tol=1e-10))
        assert np.allclose(res.x.values, [1.0, 1.0], atol=1e-6)
        assert len(res.trace) <= 201

    def test_convex_quadratic_closed_form(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(6, 6))
        A = m @ m.T + 6 * np.eye(6)
        b = rng.normal(size=6)
        x_star = np.linalg.solve(A, b)

        def quad(p):
            x = p["x"]
            return 0.5 * ad.tsum(x * ad.matmul(A, x)) - ad.tsum(b * x)

        res = lbfgs_minimize(quad, _pv(np.zeros(6)),
                             LbfgsConfig(max_iters=100, grad_tol=1e-12))
        assert np.allclose(res.x.values, x_star, atol=1e-8)

    def test_trace_non_increasing(self):
        res = lbfgs_minimize(rosenbrock, _pv([-1.2, 1.0]), LbfgsConfig(max_iters=150))
        trace = np.array(res.trace)
        assert np.all(np.diff(trace) <= 1e-14)

    def test_full_memory_quadratic_terminates_in_dim_iters(self):
        # With near-exact line searches L-BFGS reduces to CG on a quadratic,
        # terminating in <= dim iterations up to line-search round-off; the
        # gradient threshold is therefore scaled to the initial gradient.
        rng = np.random.default_rng(11)
        for dim in (4, 7, 10):
            m = rng.normal(size=(dim, dim))
            A = m @ m.T + dim * np.eye(dim)
            b = rng.normal(size=dim)

            def quad(p):
                x = p["x"]
                return 0.5 * ad.tsum(x * ad.matmul(A, x)) - ad.tsum(b * x)

            cfg = LbfgsConfig(memory=10_000, max_iters=dim,
                              grad_tol=1e-5 * np.linalg.norm(b),
                              c1=1e-12, c2=1e-6, ls_max_steps=80)
            res = lbfgs_minimize(quad, _pv(np.zeros(dim)), cfg)
            assert res.converged, f"dim={dim} not converged in {dim} iters"

    def test_strong_wolfe_holds_on_recorded_steps(self):
        cfg = LbfgsConfig(max_iters=60)
        res = lbfgs_minimize(rosenbrock, _pv([-1.2, 1.0]), cfg)
        assert res.step_records
        for rec in res.step_records:
            assert rec.f1 <= rec.f0 + cfg.c1 * rec.alpha * rec.g0_dot_d + 1e-12
            assert abs(rec.g1_dot_d) <= -cfg.c2 * rec.g0_dot_d + 1e-12

    def test_nonfinite_start_propagates(self):
        from scenefit.errors import NonFiniteLoss

        def bad(p):
            return ad.log(p["x"][0])

        with pytest.raises(NonFiniteLoss):
            lbfgs_minimize(bad, _pv([-1.0]), LbfgsConfig())


class TestAdamw:
    def test_single_step_hand_value(self):
        # Constant unit gradient, lr=0.1: bias-corrected update is lr/(1+eps).
        def lin(p):
            return p["x"][0]

        cfg = AdamwConfig(lr=0.1, weight_decay=0.0, steps=1)
        res = adamw_minimize(lin, _pv([1.0]), cfg)
        expected = 1.0 - 0.1 * 1.0 / (1.0 + cfg.eps)
        assert abs(res.x.values[0] - expected) < 1e-12
        assert abs(res.x.values[0] - 0.9) < 1e-6

    def test_zero_gradient_leaves_x(self):
        def const(p):
            return ad.Tensor(5.0) + 0.0 * ad.tsum(p["x"])

        res = adamw_minimize(const, _pv([1.0, -2.0]), AdamwConfig(lr=0.1, steps=50))
        assert np.allclose(res.x.values, [1.0, -2.0])

    def test_exact_step_count_and_quadratic_progress(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(4, 4))
        A = m @ m.T + 4 * np.eye(4)

        def quad(p):
            x = p["x"]
            return 0.5 * ad.tsum(x * ad.matmul(A, x))

        x0 = _pv(rng.normal(size=4))
        cfg = AdamwConfig(lr=5e-3, steps=4000)
        res = adamw_minimize(quad, x0, cfg)
        # steps losses + final evaluation
        assert len(res.trace) == cfg.steps + 1
        assert res.trace[-1] < res.trace[0]

        def gnorm(x):
            return np.linalg.norm(ad.gradient(quad, x)[1])

        assert gnorm(res.x) <= gnorm(x0) / 100.0

    def test_weight_decay_zero_equals_adam(self):
        # Hand-rolled Adam reference trajectory.
        rng = np.random.default_rng(9)
        A = np.diag([1.0, 3.0, 0.5])

        def quad(p):
            x = p["x"]
            return 0.5 * ad.tsum(x * ad.matmul(A, x))

        x0 = rng.normal(size=3)
        cfg = AdamwConfig(lr=1e-2, steps=200, weight_decay=0.0)
        res = adamw_minimize(quad, _pv(x0), cfg)

        x = x0.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        for step in range(1, cfg.steps + 1):
            g = A @ x
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** step)
            vhat = v / (1 - cfg.beta2 ** step)
            x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        assert np.allclose(res.x.values, x, atol=1e-12)

    def test_nonfinite_loss_reports_step(self):
        from scenefit.errors import NonFiniteLoss

        def explode(p):
            return ad.log(p["x"][0] - 0.05)

        with pytest.raises(NonFiniteLoss) as err:
            adamw_minimize(explode, _pv([0.2]), AdamwConfig(lr=0.05, steps=100))
        assert err.value.step is not None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdamwConfig(lr=-1.0)
        with pytest.raises(ValueError):
            LbfgsConfig(c1=0.5, c2=0.1)
