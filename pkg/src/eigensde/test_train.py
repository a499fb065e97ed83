"""Tests for unrolling, the NLL objective, Adam, training and evaluation."""

import copy
import math

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import linalg, stats

from eigensde.datasets import Dataset, Trajectory, split_dataset
from eigensde.errors import NonFiniteLossError, NonPSDCovarianceError, SingularBasisError, TrainingAbortedError
from eigensde.esde import GaussianBelief, control_pieces, predict_observable, propagate
from eigensde.filtering import Observation, condition_by_augmentation
from eigensde.nets import HyperModel
from eigensde.spectral import SpectralDynamics, random_spectral_dynamics
from eigensde.synthdata import generate_preset
from eigensde.train import (
    AdamState,
    BestCheckpoint,
    TrainConfig,
    adam_step,
    evaluate,
    naive_baseline,
    nll,
    oracle_model,
    report_from_predictions,
    subsample_observations,
    train,
    unroll,
)

F64 = torch.float64


@pytest.fixture(scope="module")
def small_dataset():
    return generate_preset("section5-complex", n_traj=6, seed=3, obs_per_traj=(3, 5))


def small_config(**overrides):
    values = dict(epochs=2, batch_size=3, seed=11, n=2, m=1, k=1, n_complex_pairs=1, B_mask=(True, False))
    values.update(overrides)
    return TrainConfig(**values)


class TestNll:

    def test_matches_scipy(self):
        y = np.array([0.3, -1.0])
        mean = np.array([0.1, 0.4])
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        expected = -stats.multivariate_normal(mean, cov).logpdf(y)
        assert float(nll(y, mean, cov)) == pytest.approx(expected, rel=1e-12)

    def test_masked_coordinates_are_marginalized(self):
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        expected = -stats.norm(0.4, math.sqrt(0.5)).logpdf(-1.0)
        assert float(nll([99.0, -1.0], [0.1, 0.4], cov, mask=[False, True])) == pytest.approx(expected, rel=1e-12)

    def test_indefinite_covariance(self):
        with pytest.raises(NonPSDCovarianceError):
            nll([0.0, 0.0], [0.0, 0.0], np.diag([1.0, -1.0]))


class TestAdam:

    @staticmethod
    def quadratic_grad(x):
        return torch.stack([x[0], 4.0 * x[1]])

    def test_first_step_has_learning_rate_size(self):
        x = torch.tensor([1.0, -1.0], dtype=F64)
        state = AdamState.zeros([x])
        adam_step([x], [self.quadratic_grad(x)], state, TrainConfig(lr=1e-3))
        np.testing.assert_allclose(x.numpy(), [1.0 - 1e-3, -1.0 + 1e-3], atol=1e-9)

    def test_converges_on_quadratic(self):
        x = torch.tensor([1.0, -1.0], dtype=F64)
        config = TrainConfig(lr=1e-3)
        state = AdamState.zeros([x])
        initial = float(torch.linalg.vector_norm(self.quadratic_grad(x)))
        for _ in range(5000):
            adam_step([x], [self.quadratic_grad(x)], state, config)
        final = float(torch.linalg.vector_norm(self.quadratic_grad(x)))
        assert final <= 1e-2 * initial

    def test_restored_state_continues_identically(self):
        config = TrainConfig(lr=1e-2)
        x = torch.tensor([1.0, -1.0], dtype=F64)
        state = AdamState.zeros([x])
        for _ in range(5):
            adam_step([x], [self.quadratic_grad(x)], state, config)
        y = x.clone()
        restored = AdamState.from_json(state.to_json(), [y])
        for _ in range(5):
            adam_step([x], [self.quadratic_grad(x)], state, config)
            adam_step([y], [self.quadratic_grad(y)], restored, config)
        assert torch.equal(x, y)


class TestSubsample:

    def test_probability_one_keeps_everything(self, rng):
        obs = [Observation(t, [0.0]) for t in (1.0, 2.0, 3.0)]
        assert subsample_observations(obs, 1.0, rng) == tuple(obs)

    def test_at_least_one_survives(self, rng):
        obs = [Observation(t, [0.0]) for t in (1.0, 2.0, 3.0)]
        for _ in range(20):
            assert len(subsample_observations(obs, 1e-9, rng)) == 1


class TestUnroll:

    @pytest.fixture
    def oracle(self, rng):
        dyn = random_spectral_dynamics(rng, 3, n_complex=1, m=1, k=1)
        return oracle_model(dyn)

    def test_prediction_is_recorded_before_filtering(self, oracle):
        traj = Trajectory([1.0], [Observation(0.5, [0.2]), Observation(1.5, [0.4])])
        rollout = unroll(oracle, traj)
        first, second = rollout.predictions
        belief, alpha, R = oracle.sequence_start(traj.context)
        expected_mean, expected_cov = predict_observable(propagate(belief, oracle.dynamics, [], 0.5), alpha, R)
        np.testing.assert_allclose(first.mean.numpy(), expected_mean.numpy(), atol=1e-12)
        np.testing.assert_allclose(first.cov.numpy(), expected_cov.numpy(), atol=1e-12)
        assert (first.horizon, first.n_seen) == (0.5, 0)
        assert (second.horizon, second.n_seen) == (1.0, 1)

    def test_query_times_are_added(self, oracle):
        traj = Trajectory([1.0], [Observation(1.0, [0.2])])
        rollout = unroll(oracle, traj, query_times=[0.5, 2.0])
        assert [p.t for p in rollout.predictions] == [0.5, 1.0, 2.0]
        assert [p.nll is None for p in rollout.predictions] == [True, False, True]

    def test_condition_until_stops_absorbing(self, oracle):
        traj = Trajectory([1.0], [Observation(t, [0.1]) for t in (0.5, 1.0, 1.5, 2.0)])
        rollout = unroll(oracle, traj, condition_until=1.0)
        assert [p.n_seen for p in rollout.predictions] == [0, 1, 2, 2]
        assert rollout.predictions[-1].horizon == 1.0

    def test_regime_refreshes_on_grid_and_observations(self):
        model = HyperModel(small_config().head_config(), seed=0)
        traj = Trajectory([1.0], [Observation(0.5, [0.1]), Observation(2.5, [0.3])])
        seen = []
        rollout = unroll(model, traj, on_regime=lambda t, dyn: seen.append(t))
        assert seen == [0.0, 0.5, 1.0, 2.0, 2.5]
        assert rollout.n_intervals == 5

    def test_oracle_prior_is_centered(self, rng):
        dyn = random_spectral_dynamics(rng, 2, m=1, k=1)
        model = oracle_model(dyn, x0_mean=[1.0, 2.0], x0_cov=np.eye(2))
        belief, alpha, _ = model.sequence_start([1.0])
        np.testing.assert_allclose((belief.mu + alpha).numpy(), [1.0, 2.0], atol=1e-14)


class TestTrain:

    def test_history_is_finite_and_deterministic(self, small_dataset):
        config = small_config()
        runs = []
        for _ in range(2):
            model = HyperModel(config.head_config(), seed=config.seed)
            runs.append(train(model, small_dataset, config, val_set=small_dataset))
        history = runs[0].history
        assert list(history.columns) == ["epoch", "train_nll", "val_nll", "penalty"]
        assert len(history) == 2
        assert np.isfinite(history[["train_nll", "val_nll"]].to_numpy()).all()
        pd.testing.assert_frame_equal(runs[0].history, runs[1].history)

    def test_resume_reproduces_next_epoch(self, small_dataset):
        config = small_config()
        saved = {}

        def keep_first(epoch, model, state, row, best):
            if epoch == 0:
                saved["model"] = copy.deepcopy(model.state_dict())
                saved["opt"] = state.to_json()

        full = train(HyperModel(config.head_config(), seed=config.seed), small_dataset, config,
                     on_epoch_end=keep_first)
        resumed_model = HyperModel(config.head_config(), seed=config.seed)
        resumed_model.load_state_dict(saved["model"])
        params = [p for p in resumed_model.parameters() if p.requires_grad]
        resumed = train(resumed_model, small_dataset, config,
                        opt_state=AdamState.from_json(saved["opt"], params), start_epoch=1)
        assert resumed.history["epoch"].tolist() == [1]
        assert resumed.history["train_nll"].iloc[0] == pytest.approx(full.history["train_nll"].iloc[1], rel=1e-10)

    def test_training_aborts_after_repeated_numeric_failures(self, small_dataset):
        class Broken(HyperModel):
            def regime(self, *args, **kwargs):
                raise SingularBasisError("broken basis")

        config = small_config(batch_size=1, max_consecutive_skips=2)
        with pytest.raises(TrainingAbortedError):
            train(Broken(config.head_config(), seed=0), small_dataset, config)

    def test_resume_keeps_an_earlier_best_it_cannot_beat(self, small_dataset):
        config = small_config(epochs=3)
        model = HyperModel(config.head_config(), seed=config.seed)
        earlier = copy.deepcopy(model.state_dict())
        first = train(model, small_dataset, config, val_set=small_dataset)
        resumed = train(model, small_dataset, small_config(epochs=5), val_set=small_dataset,
                        opt_state=first.opt_state, start_epoch=3, best=BestCheckpoint(-1e9, 0, earlier))
        assert resumed.history["epoch"].tolist() == [3, 4]
        assert resumed.best_epoch == 0
        assert resumed.best_score == -1e9
        assert resumed.best_state is earlier

    def test_resume_without_remaining_epochs_returns_the_given_best(self, small_dataset):
        config = small_config(epochs=2)
        model = HyperModel(config.head_config(), seed=config.seed)
        first = train(model, small_dataset, config, val_set=small_dataset)
        best = BestCheckpoint(first.best_score, first.best_epoch, first.best_state)
        again = train(model, small_dataset, config, val_set=small_dataset, start_epoch=2, best=best)
        assert len(again.history) == 0
        assert again.best_epoch == first.best_epoch
        assert again.best_state is first.best_state

    def test_abort_after_exactly_the_configured_number_of_skips(self, small_dataset):
        calls = []

        class NonFinite(HyperModel):
            def regime(self, *args, **kwargs):
                calls.append(1)
                raise NonFiniteLossError("injected non-finite batch")

        config = small_config(epochs=3, batch_size=1, max_consecutive_skips=10)
        with pytest.raises(TrainingAbortedError, match="10 consecutive"):
            train(NonFinite(config.head_config(), seed=0), small_dataset, config)
        assert len(calls) == 10


class TestEvaluate:

    def test_naive_baseline_uses_last_seen_value(self):
        observations = [
            Observation(1.0, [1.0, 5.0], mask=[True, False]),
            Observation(2.0, [2.0, 6.0]),
            Observation(3.0, [3.0, 7.0]),
        ]
        naive = naive_baseline(observations, condition_until=2.0)
        assert np.isnan(naive[0]).all()
        assert naive[1][0] == 1.0 and np.isnan(naive[1][1])
        assert naive[2].tolist() == [2.0, 6.0]

    def test_report_aggregates(self):
        table = pd.DataFrame({
            "traj_id": ["a", "a", "b"],
            "t": [1.0, 2.0, 1.0],
            "dim": [0, 0, 0],
            "horizon": [0.3, 1.5, 0.3],
            "n_seen": [0, 1, 0],
            "y_true": [1.0, 2.0, 0.0],
            "y_pred": [0.0, 2.0, 1.0],
            "var_pred": [1.0, 1.0, 1.0],
            "nll": [0.5, 0.7, 0.9],
            "y_naive": [np.nan, 1.0, np.nan],
        })
        report = report_from_predictions(table)
        assert report.mse == pytest.approx(2.0 / 3.0)
        assert report.nll == pytest.approx(0.7)
        assert report.naive_mse == pytest.approx(1.0)
        assert report.model_mse_naive_subset == pytest.approx(0.0)
        assert report.per_horizon["count"].sum() == 3
        assert report.per_seen["n_seen"].tolist() == [0, 1]

    def test_oracle_evaluation_scores_only_after_cut(self):
        dataset = generate_preset("ou", n_traj=8, seed=2)
        header = dataset.header
        model = oracle_model(SpectralDynamics.from_json(header["ground_truth"]))
        report = evaluate(model, dataset, condition_until=header["eval_condition_until"])
        table = report.per_prediction
        assert (table["t"] > 4.0).all()
        assert np.isfinite(report.nll)
        summary = report.summary_table()
        assert summary["model"].tolist() == ["eigensde", "naive"]

    def test_short_trajectories_are_skipped(self, rng):
        dyn = random_spectral_dynamics(rng, 2, m=1, k=1)
        dataset = Dataset({}, [Trajectory([1.0], [Observation(1.0, [0.0])])])
        report = evaluate(oracle_model(dyn), dataset)
        assert len(report.per_prediction) == 0
        assert math.isnan(report.mse)


@pytest.mark.slow
def test_training_lowers_validation_nll():
    dataset = generate_preset("section5-complex", n_traj=60, seed=8)
    config = small_config(epochs=8, batch_size=16, lr=3e-3)
    train_set, val_set, _ = split_dataset(dataset, seed=8)
    result = train(HyperModel(config.head_config(), seed=0), train_set, config, val_set=val_set)
    assert result.history["val_nll"].min() < result.history["val_nll"].iloc[0]


def test_ground_truth_beats_last_value_baseline():
    dataset = generate_preset("section5-complex", n_traj=20, seed=5)
    model = oracle_model(SpectralDynamics.from_json(dataset.header["ground_truth"]))
    report = evaluate(model, dataset)
    assert report.model_mse_naive_subset < report.naive_mse


def exact_predictions(dyn, traj, x0_mean, x0_cov):
    """Predictive moments at each observation from Van Loan discretization and augmented conditioning."""
    A, B, Q = dyn.A.numpy(), dyn.B.numpy(), dyn.Q.numpy()
    alpha, R = dyn.alpha.numpy(), dyn.R.numpy()
    n, m = dyn.n, dyn.m
    mu, sigma, t = np.asarray(x0_mean, dtype=float) - alpha, np.asarray(x0_cov, dtype=float), 0.0
    out = []
    for obs in traj.observations:
        for start, end, u in control_pieces(list(traj.controls), t, obs.t, dyn.k):
            h = end - start
            drift = np.zeros((n + 1, n + 1))
            drift[:n, :n], drift[:n, n] = A, B @ u.numpy()
            step = linalg.expm(drift * h)
            van_loan = linalg.expm(np.block([[-A, Q], [np.zeros((n, n)), A.T]]) * h)
            mu = step[:n, :n] @ mu + step[:n, n]
            sigma = step[:n, :n] @ sigma @ step[:n, :n].T + van_loan[n:, n:].T @ van_loan[:n, n:]
        out.append((mu[:m] + alpha[:m], sigma[:m, :m] + R))
        posterior = condition_by_augmentation(GaussianBelief(mu, 0.5 * (sigma + sigma.T), obs.t), obs, R, alpha)
        mu, sigma, t = posterior.mu.numpy(), posterior.sigma.numpy(), obs.t
    return out


def expected_nll(mean, cov, true_mean, true_cov):
    """E[-log N(y; mean, cov)] for y ~ N(true_mean, true_cov)."""
    inv = np.linalg.inv(cov)
    gap = mean - true_mean
    return 0.5 * (len(mean) * math.log(2 * math.pi) + np.linalg.slogdet(cov)[1]
                  + np.trace(inv @ true_cov) + gap @ inv @ gap)


class TestGroundTruthOptimality:
    """The exact conditional is the forecast no rescaling of mean or variance can improve."""

    @pytest.fixture(scope="class")
    def scored(self):
        dataset = generate_preset("section5-complex", n_traj=8, seed=12)
        header = dataset.header
        dyn = SpectralDynamics.from_json(header["ground_truth"])
        model = oracle_model(dyn, header.get("x0_mean"), header.get("x0_cov"))
        pairs = []
        for traj in dataset:
            predicted = unroll(model, traj).predictions
            exact = exact_predictions(dyn, traj, header.get("x0_mean", np.zeros(2)), header.get("x0_cov", np.eye(2)))
            pairs += [(p.mean.numpy(), p.cov.numpy(), *truth) for p, truth in zip(predicted, exact)]
        return pairs

    def test_matches_independent_filter(self, scored):
        assert len(scored) > 0
        for mean, cov, true_mean, true_cov in scored:
            np.testing.assert_allclose(mean, true_mean, atol=1e-8)
            np.testing.assert_allclose(cov, true_cov, atol=1e-8)

    @pytest.mark.parametrize("shift", [0.99, 1.01])
    def test_scaled_mean_has_larger_expected_squared_error(self, scored, shift):
        def expected_mse(scale):
            return sum(np.trace(S) + np.sum((scale * mean - mu) ** 2) for mean, _, mu, S in scored)

        assert expected_mse(shift) > expected_mse(1.0)

    @pytest.mark.parametrize("scale", [0.8, 1.25])
    def test_scaled_variance_has_larger_expected_nll(self, scored, scale):
        def total(c):
            return sum(expected_nll(mean, c * cov, mu, S) for mean, cov, mu, S in scored)

        assert total(scale) > total(1.0)


@pytest.mark.slow
def test_rescaled_ground_truth_variance_scores_worse_on_samples():
    dataset = generate_preset("section5-complex", n_traj=1000, seed=21)
    header = dataset.header
    model = oracle_model(SpectralDynamics.from_json(header["ground_truth"]), header.get("x0_mean"), header.get("x0_cov"))
    table = evaluate(model, dataset).per_prediction
    squared = (table["y_true"] - table["y_pred"]) ** 2

    def mean_nll(c):
        var = c * table["var_pred"]
        return float((0.5 * (np.log(2 * math.pi * var) + squared / var)).mean())

    assert mean_nll(1.0) == pytest.approx(float(table["nll"].mean()), rel=1e-9)
    assert mean_nll(1.0) < mean_nll(0.8)
    assert mean_nll(1.0) < mean_nll(1.25)
