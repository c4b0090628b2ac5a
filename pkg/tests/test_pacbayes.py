import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from opacgp.errors import InputError
from opacgp.pacbayes import (
    BatchPredictions,
    LossKind,
    LossSpec,
    constant_term,
    expected_loss,
    loss,
    normal_cdf,
    resolve_lambda,
    test_bound,
    train_objective,
)

from oracles import quad_expected_loss

KINDS = [k.value for k in LossKind]


class TestLoss:
    def test_exp_zero_residual(self):
        assert loss(LossSpec("exp", 1.0), 1.0, 1.0).item() == 0.0

    def test_exp_unit(self):
        assert loss(LossSpec("exp", 1.0), 1.0, 0.0).item() == pytest.approx(1 - math.exp(-1), abs=1e-12)

    def test_clipped_saturates(self):
        assert loss(LossSpec("clipped_square", 1.0), 2.0, 0.0).item() == 1.0

    def test_indicator_boundary_is_zero(self):
        assert loss(LossSpec("indicator", 0.5), 0.5, 0.0).item() == 0.0

    def test_interval_custom_bounds(self):
        spec = LossSpec("interval", 0.1, r_minus=lambda y: y - 1.0, r_plus=lambda y: y + 0.2)
        assert loss(spec, 0.0, -0.9).item() == 0.0
        assert loss(spec, 0.0, 0.3).item() == 1.0

    def test_bad_interval(self):
        spec = LossSpec("interval", 0.1, r_minus=lambda y: y + 1.0)
        with pytest.raises(InputError):
            loss(spec, 0.0, 0.0)

    def test_bad_epsilon(self):
        with pytest.raises(InputError):
            LossSpec("exp", 0.0)


class TestNormalCdf:
    def test_zero(self):
        assert normal_cdf(0.0).item() == 0.5

    def test_symmetry(self, rng):
        z = torch.tensor(rng.normal(scale=3, size=100))
        np.testing.assert_allclose((normal_cdf(-z) + normal_cdf(z)).numpy(), 1.0, atol=1e-15)

    def test_quantile(self):
        import mpmath

        mpmath.mp.dps = 30
        ref = float(mpmath.quad(lambda t: mpmath.exp(-t * t / 2), [-mpmath.inf, 1.959964]) / mpmath.sqrt(2 * mpmath.pi))
        assert normal_cdf(1.959964).item() == pytest.approx(ref, abs=1e-12)
        assert normal_cdf(1.959964).item() == pytest.approx(0.975, abs=1e-6)


class TestExpectedLoss:
    def test_exp_degenerate(self):
        assert expected_loss(LossSpec("exp", 0.1), 0.3, 0.3, 0.0).item() == 0.0

    def test_exp_half_width(self):
        eps2 = 0.01
        val = expected_loss(LossSpec.from_epsilon2("exp", eps2), 0.0, 0.0, eps2 / 2).item()
        assert val == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_reference_point(self, kind):
        spec = LossSpec.from_epsilon2(kind, 0.01)
        got = expected_loss(spec, 0.3, -0.1, 0.25).item()
        assert got == pytest.approx(quad_expected_loss(kind, 0.3, -0.1, 0.25, spec.epsilon), abs=1e-8)

    @pytest.mark.parametrize("kind", KINDS)
    def test_random_against_quadrature(self, kind, rng):
        for _ in range(60):
            eps2 = float(rng.choice([0.01, 0.1, 1.0]))
            y, m = rng.normal(size=2)
            var = rng.uniform(0, 4)
            spec = LossSpec.from_epsilon2(kind, eps2)
            got = expected_loss(spec, y, m, var).item()
            assert got == pytest.approx(quad_expected_loss(kind, y, m, var, spec.epsilon), abs=1e-8)

    def test_asymmetric_interval_against_quadrature(self, rng):
        spec = LossSpec("interval", 0.1, r_minus=lambda y: y - 0.3, r_plus=lambda y: y + 0.05)
        for _ in range(20):
            y, m = rng.normal(size=2)
            var = rng.uniform(0.01, 2)
            ref = quad_expected_loss("interval", y, m, var, 0.1, lo=y - 0.3, hi=y + 0.05)
            assert expected_loss(spec, y, m, var).item() == pytest.approx(ref, abs=1e-8)

    def test_indicator_wide_variance(self):
        assert expected_loss(LossSpec("indicator", 0.1), 0.0, 0.0, 1e6).item() > 0.999

    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_variance_is_loss(self, kind, rng):
        spec = LossSpec("interval" if kind == "interval" else kind, 0.2)
        y = torch.tensor(rng.normal(size=50))
        m = torch.tensor(rng.normal(size=50))
        assert torch.equal(expected_loss(spec, y, m, torch.zeros(50)), loss(spec, y, m))

    def test_negative_variance(self):
        with pytest.raises(InputError):
            expected_loss(LossSpec(), 0.0, 0.0, -1e-3)

    @pytest.mark.parametrize("kind", KINDS)
    def test_bounded(self, kind, rng):
        n = 10_000
        spec = LossSpec(kind, float(rng.uniform(0.01, 2)))
        vals = expected_loss(spec, torch.tensor(rng.normal(scale=3, size=n)), torch.tensor(rng.normal(scale=3, size=n)),
                             torch.tensor(rng.exponential(2.0, size=n)))
        assert bool(((vals >= 0) & (vals <= 1)).all())

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 3), st.floats(0, 3), st.floats(1e-4, 4), st.floats(0.05, 2))
    def test_exp_monotone_in_residual(self, r1, r2, var, eps):
        spec = LossSpec("exp", eps)
        lo, hi = sorted((r1, r2))
        assert expected_loss(spec, 0.0, lo, var).item() <= expected_loss(spec, 0.0, hi, var).item() + 1e-15

    def test_gradient_through_closed_form(self):
        m = torch.tensor(0.2, requires_grad=True)
        v = torch.tensor(0.3, requires_grad=True)
        expected_loss(LossSpec("clipped_square", 0.5), 0.0, m, v).backward()
        assert torch.isfinite(m.grad) and torch.isfinite(v.grad)


class TestObjective:
    def test_constant_only(self):
        rep = train_objective([(0.0, 0.0, 0.0)] * 3, 0.0, 100, 0.01, 0.05, LossSpec())
        assert float(rep.empirical_term) == 0.0
        assert float(rep.kl_term) == 0.0
        assert rep.constant_term == pytest.approx(0.5 + math.log(20) / 0.01, abs=1e-10)
        assert float(rep.total) == pytest.approx(300.0732, abs=1e-4)

    def test_delta_one(self):
        assert constant_term(10, 0.5, 1.0) == pytest.approx(0.5 * 10 / 2)

    def test_total_is_sum_of_terms(self, rng):
        spec = LossSpec()
        preds = [(rng.normal(), rng.normal(), rng.uniform(0, 1)) for _ in range(5)]
        rep = train_objective(preds, 0.37, 5, 0.2, 0.1, spec)
        emp = sum(expected_loss(spec, *p).item() for p in preds)
        assert float(rep.total) == pytest.approx(emp + 0.37 / 0.2 + 0.2 * 5 / 2 + math.log(10) / 0.2, abs=1e-12)

    def test_batch_tuple_equals_list(self, rng):
        preds = [(rng.normal(), rng.normal(), rng.uniform(0, 1)) for _ in range(4)]
        t = BatchPredictions(*(torch.tensor(c) for c in zip(*preds)))
        a = train_objective(preds, 0.1, 4, 0.5, 0.05, LossSpec())
        b = train_objective(t, 0.1, 4, 0.5, 0.05, LossSpec())
        assert float(a.total) == float(b.total)

    @pytest.mark.parametrize("lam,delta", [(0.0, 0.05), (-1.0, 0.05), (1.0, 0.0), (1.0, 1.5)])
    def test_invalid(self, lam, delta):
        with pytest.raises(InputError):
            train_objective([], 0.0, 1, lam, delta, LossSpec())

    def test_negative_kl(self):
        with pytest.raises(InputError):
            train_objective([], -0.1, 1, 1.0, 0.05, LossSpec())

    def test_monotone_in_delta(self, rng):
        preds = [(rng.normal(), rng.normal(), 0.1)]
        totals = [float(train_objective(preds, 0.2, 10, 0.1, d, LossSpec()).total) for d in (0.01, 0.05, 0.2, 1.0)]
        assert totals == sorted(totals, reverse=True)

    def test_constant_has_no_gradient(self):
        m = torch.tensor([0.1, -0.2], requires_grad=True)
        kl = (m * m).sum()
        batch = BatchPredictions(torch.zeros(2), m, torch.full((2,), 0.05))
        rep = train_objective(batch, kl, 10, 0.1, 0.05, LossSpec())
        g1 = torch.autograd.grad(rep.total, m, retain_graph=True)[0]
        g2 = torch.autograd.grad(rep.empirical_term + rep.kl_term, m)[0]
        assert torch.equal(g1, g2)


class TestTestBound:
    def test_substitution(self):
        assert test_bound(0.0, 1, 1.0, 1 / math.e) == pytest.approx(1.5, abs=1e-15)

    def test_dominates_cumulative(self, rng):
        for _ in range(100):
            c = rng.uniform(0, 50)
            assert test_bound(c, int(rng.integers(0, 100)), rng.uniform(0.01, 2), rng.uniform(0.01, 1)) >= c

    def test_matches_train_total_minus_kl(self, rng):
        spec = LossSpec()
        preds = [(rng.normal(), rng.normal(), rng.uniform(0, 1)) for _ in range(6)]
        rep = train_objective(preds, 0.8, 6, 0.3, 0.05, spec)
        tb = test_bound(float(rep.empirical_term), 6, 0.3, 0.05)
        assert tb == pytest.approx(float(rep.total - rep.kl_term), abs=1e-12)

    def test_resolve_lambda(self):
        assert resolve_lambda("1/m", 4) == 0.25
        assert resolve_lambda("one_over_m", 2) == 0.5
        assert resolve_lambda(0.3, 100) == 0.3
        with pytest.raises(InputError):
            resolve_lambda("1/m", 0)
