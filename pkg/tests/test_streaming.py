
import numpy as np
import pytest
import torch

from opacgp.errors import InputError
from opacgp.exact_gp import GaussianPosterior, gp_posterior
from opacgp.kernels import KernelParams, kernel_matrix, psd_cholesky
from opacgp.streaming import (
    VariationalState,
    gaussian_kl,
    kl_new_old,
    load_state,
    predictive,
    save_state,
    snapshot,
    sparse_posterior_state,
    state_from_bytes,
    state_nbytes,
    state_to_bytes,
    union_points,
)


def random_state(rng, M=5, D=1, jitter=0.0):
    p = KernelParams.create(rng.uniform(0.5, 1.5, size=D), rng.uniform(0.5, 2.0), 0.1)
    Z = rng.normal(size=(M, D))
    L = np.tril(rng.normal(scale=0.3, size=(M, M)), -1) + np.diag(rng.uniform(0.2, 1.0, size=M))
    return VariationalState(torch.tensor(Z), torch.tensor(rng.normal(size=M)), torch.tensor(L), p, jitter)


def exact_state(p, X, y):
    post = gp_posterior(p, X, y, X)
    return VariationalState(torch.tensor(X), post.mean, psd_cholesky(post.cov).L, p)


class TestPredictive:
    def test_prior_matched_covariance_at_inducing_points(self, rng):
        p = KernelParams.create([0.9], 1.3)
        Z = np.linspace(-1, 1, 4)[:, None]
        m = torch.tensor(rng.normal(size=4))
        s = VariationalState(torch.tensor(Z), m, psd_cholesky(kernel_matrix(p, Z, Z)).L, p)
        pred = predictive(s, Z)
        np.testing.assert_allclose(pred.mean.numpy(), m.numpy(), atol=1e-10)
        np.testing.assert_allclose(pred.cov.numpy(), s.S.numpy(), atol=1e-10)

    def test_uninformative_state_is_prior(self, rng):
        p = KernelParams.create([0.9], 1.3)
        s = VariationalState.from_prior(p, np.linspace(-1, 1, 4)[:, None])
        Xs = rng.normal(size=(6, 1))
        pred = predictive(s, Xs)
        np.testing.assert_allclose(pred.mean.numpy(), 0.0, atol=1e-12)
        np.testing.assert_allclose(pred.cov.numpy(), kernel_matrix(p, Xs, Xs).numpy(), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_gp_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, size=(12, 1))
        y = np.sin(2 * X[:, 0]) + 0.1 * rng.normal(size=12)
        p = KernelParams.create([0.8], 1.2, 0.05)
        s = exact_state(p, X, y)
        Xs = rng.uniform(-2.5, 2.5, size=(20, 1))
        a = predictive(s, Xs)
        b = gp_posterior(p, X, y, Xs)
        np.testing.assert_allclose(a.mean.numpy(), b.mean.numpy(), atol=1e-6)
        np.testing.assert_allclose(a.cov.numpy(), b.cov.numpy(), atol=1e-6)

    def test_diagonal_matches_full(self, rng):
        s = random_state(rng)
        Xs = rng.normal(size=(7, 1))
        np.testing.assert_allclose(predictive(s, Xs, full_cov=False).cov.numpy(),
                                   predictive(s, Xs).cov.diagonal().numpy(), atol=1e-12)

    def test_marginal_variances_positive(self, rng):
        s = random_state(rng, M=8)
        Xs = rng.uniform(-5, 5, size=(200, 1))
        assert torch.all(predictive(s, Xs, full_cov=False).var > 0)

    def test_sparse_posterior_with_Z_equal_X_is_exact(self, rng):
        X = rng.uniform(-2, 2, size=(9, 1))
        y = np.cos(X[:, 0])
        p = KernelParams.create([0.7], 1.1, 0.1)
        s = sparse_posterior_state(p, X, X, y)
        Xs = rng.uniform(-2, 2, size=(5, 1))
        a, b = predictive(s, Xs), gp_posterior(p, X, y, Xs)
        np.testing.assert_allclose(a.mean.numpy(), b.mean.numpy(), atol=1e-8)
        np.testing.assert_allclose(a.cov.numpy(), b.cov.numpy(), atol=1e-8)


class TestGaussianKL:
    def test_identical_is_zero(self, rng):
        G = rng.normal(size=(4, 4))
        P = GaussianPosterior(torch.tensor(rng.normal(size=4)), torch.tensor(G @ G.T + np.eye(4)))
        assert gaussian_kl(P, P).item() == pytest.approx(0.0, abs=1e-10)

    def test_unit_mean_shift(self):
        Q = GaussianPosterior(torch.tensor([1.0]), torch.tensor([[1.0]]))
        P = GaussianPosterior(torch.tensor([0.0]), torch.tensor([[1.0]]))
        assert gaussian_kl(Q, P).item() == pytest.approx(0.5, abs=1e-15)

    def test_dimension_mismatch(self):
        Q = GaussianPosterior(torch.zeros(2), torch.eye(2))
        P = GaussianPosterior(torch.zeros(3), torch.eye(3))
        with pytest.raises(InputError):
            gaussian_kl(Q, P)

    def test_nonnegative_random_pairs(self, rng):
        for _ in range(200):
            k = rng.integers(1, 5)
            A, B = rng.normal(size=(k, k)), rng.normal(size=(k, k))
            Q = GaussianPosterior(torch.tensor(rng.normal(size=k)), torch.tensor(A @ A.T + 0.1 * np.eye(k)))
            P = GaussianPosterior(torch.tensor(rng.normal(size=k)), torch.tensor(B @ B.T + 0.1 * np.eye(k)))
            assert gaussian_kl(Q, P).item() > 0


class TestKLNewOld:
    def test_equal_states(self, rng):
        s = random_state(rng)
        assert kl_new_old(s, snapshot(s)).item() == pytest.approx(0.0, abs=1e-8)

    def test_shifted_mean_against_direct_assembly(self, rng):
        p = KernelParams.create([0.9], 1.3)
        Z = torch.tensor(np.linspace(-1, 1, 4)[:, None])
        old = VariationalState.from_prior(p, Z)
        shift = torch.tensor(rng.normal(scale=0.3, size=4))
        new = VariationalState(Z, shift, old.S_factor, p)
        # hand assembly: both covariances equal K_ZZ at Z, means 0 and shift
        Kzz = kernel_matrix(p, Z, Z).numpy()
        expected = 0.5 * shift.numpy() @ np.linalg.solve(Kzz, shift.numpy())
        assert kl_new_old(new, snapshot(old), min_jitter=0.0).item() == pytest.approx(expected, rel=1e-8)

    def test_permutation_invariance(self, rng):
        a, b = random_state(rng), random_state(rng)
        b = VariationalState(b.Z, b.m_u, b.S_factor, a.params)
        E = torch.cat([a.Z, b.Z])
        perm = torch.tensor(rng.permutation(E.shape[0]))
        k1 = kl_new_old(a, b, eval_points=E)
        k2 = kl_new_old(a, b, eval_points=E[perm])
        assert k1.item() == pytest.approx(k2.item(), rel=1e-9)

    def test_union_drops_exact_duplicates(self):
        old = torch.tensor([[0.0], [1.0]])
        new = torch.tensor([[1.0], [2.0], [2.0]])
        assert union_points(old, new).tolist() == [[0.0], [1.0], [2.0]]


class TestSnapshot:
    def test_mutation_does_not_leak(self, rng):
        s = random_state(rng)
        snap = snapshot(s)
        before = snap.m_u.clone()
        s.m_u.add_(1.0)
        assert torch.equal(snap.m_u, before)

    def test_idempotent(self, rng):
        s = random_state(rng)
        assert snapshot(snapshot(s)).state.equals(s)

    def test_self_kl(self, rng):
        s = random_state(rng)
        assert kl_new_old(s, snapshot(s)).item() == pytest.approx(0.0, abs=1e-10)


class TestSerialization:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        s = random_state(rng, M=6, D=2, jitter=1e-4)
        n = save_state(s, tmp_path / "s.bin")
        assert load_state(tmp_path / "s.bin").equals(s)
        assert n == len(state_to_bytes(s))

    def test_bytes_deterministic(self, rng):
        s = random_state(rng)
        assert state_to_bytes(s) == state_to_bytes(s.detach())

    def test_size_depends_only_on_shapes(self, rng):
        a, b = random_state(rng, M=7), random_state(rng, M=7)
        assert len(state_to_bytes(a)) == len(state_to_bytes(b))
        assert state_nbytes(a) == 8 * (7 + 7 + 49 + 1 + 2)

    def test_rejects_garbage(self):
        with pytest.raises(InputError):
            state_from_bytes(b"not a state")
