"""Tests for closed-form propagation through linear SDE regimes."""

import math

import numpy as np
import pytest
import torch
from scipy import integrate, linalg

from eigensde.errors import ConfigError, ScheduleError, ScheduleGapError, TimeReversalError
from eigensde.esde import (
    ControlSegment,
    GaussianBelief,
    check_schedule,
    control_integral_analytic,
    control_integral_numeric,
    control_pieces,
    exp_trig_integral,
    moment_ode_oracle,
    noise_integral_analytic,
    noise_integral_numeric,
    predict_observable,
    propagate,
    transfer_matrix,
)
from eigensde.spectral import EigenBasis, SpectralDynamics, Spectrum

F64 = torch.float64


def scalar(value):
    return torch.tensor(value, dtype=F64)


class TestExpTrigIntegral:

    @pytest.mark.parametrize("c, omega, T", [(-0.3, 1.7, 2.0), (0.4, 0.0, 1.5), (-2.0, 5.0, 0.3)])
    def test_matches_quadrature(self, c, omega, T):
        C, S = exp_trig_integral(scalar(c), scalar(omega), T)
        C_ref, _ = integrate.quad(lambda s: math.exp(c * s) * math.cos(omega * s), 0.0, T, epsabs=1e-13)
        S_ref, _ = integrate.quad(lambda s: math.exp(c * s) * math.sin(omega * s), 0.0, T, epsabs=1e-13)
        assert float(C) == pytest.approx(C_ref, abs=1e-11)
        assert float(S) == pytest.approx(S_ref, abs=1e-11)

    def test_zero_rate_and_frequency(self):
        C, S = exp_trig_integral(scalar(0.0), scalar(0.0), 2.5)
        assert float(C) == 2.5
        assert float(S) == 0.0

    def test_continuous_across_series_guard(self):
        for c in (0.9e-6, 1.1e-6):
            C, S = exp_trig_integral(scalar(c), scalar(0.0), 1.0)
            assert float(C) == pytest.approx(1.0 + c / 2, abs=1e-9)
            assert float(S) == 0.0

    def test_gradient(self):
        c = torch.tensor([-0.4, 0.0, 0.6], dtype=F64, requires_grad=True)
        omega = torch.tensor([1.3, 2.0, 0.0], dtype=F64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda x, w: exp_trig_integral(x, w, 1.7), (c, omega))


class TestSchedule:

    def test_gaps_fill_with_zero(self, gapped_schedule):
        pieces = control_pieces(gapped_schedule, 0.0, 2.5, k=2)
        spans = [(round(a, 12), round(b, 12)) for a, b, _ in pieces]
        assert spans == [(0.0, 0.7), (0.7, 1.2), (1.2, 2.0), (2.0, 2.5)]
        assert pieces[1][2].tolist() == [0.0, 0.0]

    def test_strict_mode_rejects_gap(self, gapped_schedule):
        with pytest.raises(ScheduleGapError):
            control_pieces(gapped_schedule, 0.0, 2.0, k=2, strict=True)

    def test_overlap_rejected(self):
        with pytest.raises(ScheduleError):
            check_schedule([ControlSegment(0.0, 1.0, [1.0]), ControlSegment(0.5, 2.0, [1.0])])

    def test_empty_segment_rejected(self):
        with pytest.raises(ScheduleError):
            ControlSegment(1.0, 1.0, [0.0])

    def test_channel_count_checked(self, gapped_schedule):
        with pytest.raises(ConfigError):
            control_pieces(gapped_schedule, 0.0, 1.0, k=3)


class TestIntegrals:

    def test_transfer_matrix(self, mixed_dynamics):
        dyn = mixed_dynamics
        G = transfer_matrix(dyn.spectrum, dyn.basis, 0.9)
        np.testing.assert_allclose(G.numpy(), torch.linalg.matrix_exp(dyn.A * 0.9).numpy(), atol=1e-10)

    def test_control_integral_against_riemann(self, mixed_dynamics):
        dyn = mixed_dynamics
        u = torch.tensor([0.7, -1.2], dtype=F64)
        analytic = control_integral_analytic(dyn.spectrum, dyn.basis, u, dyn.B, 0.5, 1.5)
        numeric = control_integral_numeric(dyn.spectrum, dyn.basis, lambda s: u, dyn.B, 0.5, 1.5, 1e-5)
        np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), atol=1e-4)

    def test_noise_integral_against_riemann(self, mixed_dynamics):
        dyn = mixed_dynamics
        analytic = noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, 0.0, 1.0)
        numeric = noise_integral_numeric(dyn.spectrum, dyn.basis, dyn.Q, 0.0, 1.0, 1e-5)
        np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), atol=1e-4)

    def test_noise_integral_reaches_lyapunov_solution(self, mixed_dynamics):
        dyn = mixed_dynamics
        A, Q = dyn.A.numpy(), dyn.Q.numpy()
        stationary = linalg.solve_continuous_lyapunov(A, -Q)
        long_run = noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, 0.0, 80.0)
        np.testing.assert_allclose(long_run.numpy(), stationary, atol=1e-8)

    def test_control_riemann_sum_converges_at_first_order(self, mixed_dynamics):
        dyn = mixed_dynamics
        u = torch.tensor([0.7, -1.2], dtype=F64)
        analytic = control_integral_analytic(dyn.spectrum, dyn.basis, u, dyn.B, 0.0, 1.0).numpy()
        errors = [
            np.linalg.norm(
                control_integral_numeric(dyn.spectrum, dyn.basis, lambda s: u, dyn.B, 0.0, 1.0, dt).numpy() - analytic
            )
            for dt in (4e-3, 2e-3, 1e-3)
        ]
        assert errors[0] / errors[1] == pytest.approx(2.0, rel=0.05)
        assert errors[1] / errors[2] == pytest.approx(2.0, rel=0.05)

    def test_zero_eigenvalue(self):
        spectrum, basis = Spectrum([0.0, -1.0], []), EigenBasis(np.eye(2))
        drive = control_integral_analytic(spectrum, basis, [1.0, 1.0], np.eye(2), 0.0, 2.0)
        np.testing.assert_allclose(drive.numpy(), [2.0, 1.0 - math.exp(-2.0)], atol=1e-12)
        noise = noise_integral_analytic(spectrum, basis, np.eye(2), 0.0, 2.0)
        np.testing.assert_allclose(noise.numpy(), np.diag([2.0, (1.0 - math.exp(-4.0)) / 2]), atol=1e-12)

    def test_pure_rotation(self):
        spectrum, basis = Spectrum([], [[0.0, 1.0]]), EigenBasis(np.eye(2))
        T = 1.1
        drive = control_integral_analytic(spectrum, basis, [1.0], [[1.0], [0.0]], 0.0, T)
        np.testing.assert_allclose(drive.numpy(), [math.sin(T), math.cos(T) - 1.0], atol=1e-12)
        noise = noise_integral_analytic(spectrum, basis, np.eye(2), 0.0, T)
        np.testing.assert_allclose(noise.numpy(), T * np.eye(2), atol=1e-12)

    def test_noise_integral_gradient(self):
        basis = EigenBasis(torch.tensor([[1.0, 0.3, 0.1], [0.2, 1.0, -0.4], [0.0, 0.5, 1.2]], dtype=F64))

        def noise(reals, pairs):
            return noise_integral_analytic(Spectrum(reals, pairs), basis, torch.eye(3, dtype=F64), 0.0, 0.8)

        reals = torch.tensor([-0.7], dtype=F64, requires_grad=True)
        pairs = torch.tensor([[-0.3, 1.4]], dtype=F64, requires_grad=True)
        assert torch.autograd.gradcheck(noise, (reals, pairs))

    def test_backwards_interval_rejected(self, mixed_dynamics):
        dyn = mixed_dynamics
        with pytest.raises(TimeReversalError):
            noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, 1.0, 0.5)


class TestPropagate:

    def test_zero_elapsed_time_is_identity(self, mixed_dynamics, random_belief, gapped_schedule):
        belief = random_belief(4, t=0.3)
        out = propagate(belief, mixed_dynamics, gapped_schedule, 0.3)
        np.testing.assert_allclose(out.mu.numpy(), belief.mu.numpy(), atol=1e-14)
        np.testing.assert_allclose(out.sigma.numpy(), belief.sigma.numpy(), atol=1e-14)

    def test_backwards_rejected(self, mixed_dynamics, random_belief):
        with pytest.raises(TimeReversalError):
            propagate(random_belief(4, t=1.0), mixed_dynamics, [], 0.5)

    def test_composition(self, mixed_dynamics, random_belief, gapped_schedule):
        belief = random_belief(4)
        direct = propagate(belief, mixed_dynamics, gapped_schedule, 2.4)
        stepped = propagate(propagate(belief, mixed_dynamics, gapped_schedule, 0.9), mixed_dynamics, gapped_schedule, 2.4)
        np.testing.assert_allclose(stepped.mu.numpy(), direct.mu.numpy(), atol=1e-12)
        np.testing.assert_allclose(stepped.sigma.numpy(), direct.sigma.numpy(), atol=1e-12)

    def test_matches_moment_ode(self, mixed_dynamics, random_belief, gapped_schedule):
        belief = random_belief(4)
        fast = propagate(belief, mixed_dynamics, gapped_schedule, 2.5)
        slow = moment_ode_oracle(mixed_dynamics, gapped_schedule, belief, 2.5)
        scale_mu = max(1.0, float(np.linalg.norm(slow.mu.numpy())))
        scale_sigma = max(1.0, float(np.linalg.norm(slow.sigma.numpy())))
        assert np.linalg.norm(fast.mu.numpy() - slow.mu.numpy()) / scale_mu <= 1e-6
        assert np.linalg.norm(fast.sigma.numpy() - slow.sigma.numpy()) / scale_sigma <= 1e-6

    def test_covariance_stays_psd(self, mixed_dynamics, random_belief, gapped_schedule):
        out = propagate(random_belief(4), mixed_dynamics, gapped_schedule, 7.0)
        assert torch.equal(out.sigma, out.sigma.T)
        assert float(torch.linalg.eigvalsh(out.sigma).min()) >= -1e-10

    def test_variance_grows_from_a_known_state(self, mixed_dynamics, rng):
        belief = GaussianBelief(rng.normal(size=4), np.zeros((4, 4)), 0.0)
        previous = belief.sigma.numpy()
        for t in np.arange(0.25, 6.01, 0.25):
            current = propagate(belief, mixed_dynamics, [], float(t)).sigma.numpy()
            assert np.linalg.eigvalsh(current - previous).min() >= -1e-8
            previous = current

    def test_matches_euler_maruyama_sample_moments(self, mixed_dynamics, random_belief, gapped_schedule):
        dyn = mixed_dynamics
        belief = random_belief(4)
        T, dt, n_paths = 1.5, 1e-3, 20000
        A, B = dyn.A.numpy(), dyn.B.numpy()
        L_q = np.linalg.cholesky(dyn.Q.numpy())
        sampler = np.random.default_rng(99)
        x = sampler.multivariate_normal(belief.mu.numpy(), belief.sigma.numpy(), size=n_paths)
        for start, end, u in control_pieces(gapped_schedule, 0.0, T, dyn.k):
            forcing = B @ u.numpy()
            count = max(1, round((end - start) / dt))
            h = (end - start) / count
            for _ in range(count):
                x = x + (x @ A.T + forcing) * h + math.sqrt(h) * sampler.standard_normal(x.shape) @ L_q.T
        exact = propagate(belief, dyn, gapped_schedule, T)
        mu, sigma = exact.mu.numpy(), exact.sigma.numpy()
        scale = max(1.0, float(np.abs(sigma).max()))
        np.testing.assert_allclose(x.mean(axis=0), mu, atol=0.05 * scale)
        np.testing.assert_allclose(np.cov(x, rowvar=False), sigma, atol=0.05 * scale)

    def test_stable_mean_decays_to_zero_without_control(self, mixed_dynamics, random_belief):
        out = propagate(random_belief(4), mixed_dynamics, [], 200.0)
        np.testing.assert_allclose(out.mu.numpy(), np.zeros(4), atol=1e-8)

    def test_oracle_step_is_bounded(self, mixed_dynamics, random_belief):
        with pytest.raises(ConfigError):
            moment_ode_oracle(mixed_dynamics, [], random_belief(4), 1.0, step=1e-2)


def test_predict_observable_adds_offset_and_noise():
    belief = GaussianBelief([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]), 0.0)
    mean, cov = predict_observable(belief, [0.5, -0.5, 0.0], np.diag([0.1, 0.2]))
    assert mean.tolist() == [1.5, 1.5]
    np.testing.assert_allclose(cov.numpy(), np.diag([1.1, 2.2]))


def test_regime_with_mask_ignores_masked_control():
    spectrum, basis = Spectrum([-1.0, -2.0], []), EigenBasis(np.eye(2))
    dyn = SpectralDynamics(spectrum, basis, np.zeros((2, 2)), [0.0, 0.0], [[1.0], [1.0]], [[0.0]], B_mask=[True, False])
    out = propagate(GaussianBelief([0.0, 0.0], np.zeros((2, 2)), 0.0), dyn, [ControlSegment(0.0, 1.0, [1.0])], 1.0)
    assert float(out.mu[0]) == 0.0
    assert float(out.mu[1]) == pytest.approx((1.0 - math.exp(-2.0)) / 2, abs=1e-12)
