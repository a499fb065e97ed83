"""
eigensde Training and Evaluation
================================

Sequence unrolling (prior, piecewise regimes, closed-form propagation,
filtering at observations), the Gaussian NLL objective, a functional
Adam optimizer, the training loop and evaluation tables.

Predictions at an observation time are always recorded before the
observation is absorbed, so evaluation never sees the value it scores.
"""

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .datasets import Trajectory
from .errors import (
    ConfigError,
    NonFiniteLossError,
    NonPSDCovarianceError,
    NumericError,
    TrainingAbortedError,
)
from .esde import GaussianBelief, predict_observable, propagate
from .filtering import condition
from .log import get_logger
from .nets import HeadConfig
from .spectral import DTYPE, as_tensor

logger = get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_HORIZON_BINS = (0.0, 0.5, 1.0, 2.0, 4.0, math.inf)

__all__ = [
    "AdamState",
    "BestCheckpoint",
    "EvaluationReport",
    "OracleModel",
    "Prediction",
    "Rollout",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "adam_step",
    "evaluate",
    "naive_baseline",
    "nll",
    "oracle_model",
    "subsample_observations",
    "train",
    "unroll",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    interval_dt: float = 1.0
    subsample_prob: float = 0.7
    seed: int = 0
    stable: bool = True
    n: int = 2
    m: int = 1
    k: int = 1
    n_complex_pairs: int = 0
    context_dim: int = 1
    hypernet_disabled: bool = False
    detach_belief_summary: bool = True
    B_mask: tuple = field(default=None)
    penalty_weight: float = 1.0
    max_consecutive_skips: int = 10

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.B_mask is not None:
            object.__setattr__(self, "B_mask", tuple(bool(v) for v in self.B_mask))

    def validate(self):
        if not 0 < self.subsample_prob <= 1:
            raise ConfigError(f"subsample_prob must lie in (0, 1], got {self.subsample_prob}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 0 or self.max_consecutive_skips < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        self.head_config()
        return self

    def head_config(self):
        return HeadConfig(
            n=self.n,
            m=self.m,
            k=self.k,
            n_complex_pairs=self.n_complex_pairs,
            stable=self.stable,
            hypernet_disabled=self.hypernet_disabled,
            interval_dt=self.interval_dt,
            context_dim=self.context_dim,
            detach_belief_summary=self.detach_belief_summary,
            B_mask=self.B_mask,
        ).validate()

    def to_json(self):
        payload = asdict(self)
        payload["betas"] = list(self.betas)
        payload["B_mask"] = None if self.B_mask is None else list(self.B_mask)
        return payload


@dataclass(frozen=True)
class Prediction:
    """Pre-filter prediction of the observable at time ``t``."""

    t: float
    mean: torch.Tensor
    cov: torch.Tensor
    nll: torch.Tensor = None
    horizon: float = 0.0
    n_seen: int = 0
    observation: object = None


@dataclass
class Rollout:
    predictions: list
    penalty: torch.Tensor
    n_intervals: int

    def scored(self):
        return [p for p in self.predictions if p.nll is not None]


class OracleModel:
    """
    Ground-truth parameters behind the model interface used by ``unroll``:
    a fixed regime, a fixed prior, no hypernetwork.
    """

    interval_dt = math.inf

    def __init__(self, dynamics, x0_mean=None, x0_cov=None):
        self.dynamics = dynamics
        n = dynamics.n
        x0_mean = torch.zeros(n, dtype=DTYPE) if x0_mean is None else as_tensor(x0_mean)
        x0_cov = torch.eye(n, dtype=DTYPE) if x0_cov is None else as_tensor(x0_cov)
        self.prior_belief = GaussianBelief(x0_mean - dynamics.alpha, x0_cov, 0.0)

    def sequence_start(self, context):
        return self.prior_belief, self.dynamics.alpha, self.dynamics.R

    def context_weights(self, context):
        return None

    def regime(self, context, belief, alpha, R, W=None):
        return self.dynamics, torch.zeros((), dtype=DTYPE)


def oracle_model(dynamics, x0_mean=None, x0_cov=None):
    """Inject known dynamics (hypernet bypassed); x0 moments are uncentered."""
    return OracleModel(dynamics, x0_mean, x0_cov)


def nll(y, mean, cov, mask=None):
    """Gaussian negative log density of ``y`` on the observed coordinates."""
    y, mean, cov = as_tensor(y), as_tensor(mean), as_tensor(cov)
    if mask is not None:
        idx = torch.nonzero(torch.as_tensor(mask, dtype=torch.bool)).reshape(-1)
        y, mean, cov = y[idx], mean[idx], cov[idx][:, idx]
    if y.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    L, info = torch.linalg.cholesky_ex(cov)
    if int(info) != 0:
        raise NonPSDCovarianceError("predictive covariance is not positive definite")
    z = torch.linalg.solve_triangular(L, (y - mean).unsqueeze(1), upper=False).squeeze(1)
    return 0.5 * (y.shape[0] * LOG_2PI + (z * z).sum()) + torch.log(torch.diagonal(L)).sum()


def _event_times(observations, query_times, interval_dt):
    obs_times = [obs.t for obs in observations]
    queries = sorted(set(float(t) for t in (query_times or [])))
    horizon = max(obs_times + queries + [0.0])
    grid = []
    if math.isfinite(interval_dt):
        grid = [j * interval_dt for j in range(1, int(math.floor(horizon / interval_dt + 1e-9)) + 1)]
    boundaries = set(obs_times) | set(grid)
    return sorted(boundaries | set(queries)), boundaries, set(queries)


def unroll(model, traj, query_times=None, condition_until=None, observations=None, on_regime=None):
    """
    Run one sequence forward.

    The prior gives the belief at t = 0. The regime is refreshed at every
    boundary (observation times and multiples of ``interval_dt``), the belief
    is propagated in closed form between events, and at each observation
    the pre-filter prediction and its NLL are recorded before conditioning.
    Observations after ``condition_until`` are scored but not absorbed.
    ``on_regime(t, dynamics)`` is called for every regime in use.

    Returns:
    --------
    Rollout with one Prediction per observation and per query time.
    """
    observations = traj.observations if observations is None else tuple(observations)
    events, boundaries, queries = _event_times(observations, query_times, model.interval_dt)
    by_time = {obs.t: obs for obs in observations}

    belief, alpha, R = model.sequence_start(traj.context)
    W = model.context_weights(traj.context)
    dynamics, penalty = model.regime(traj.context, belief, alpha, R, W)
    if on_regime is not None:
        on_regime(0.0, dynamics)
    schedule = list(traj.controls)
    predictions = []
    interval = 0
    last_seen = 0.0
    n_seen = 0

    for t in events:
        belief = propagate(belief, dynamics, schedule, t)
        obs = by_time.get(t)
        if obs is not None or t in queries:
            mean, cov = predict_observable(belief, alpha, R)
            loss = None
            if obs is not None:
                loss = nll(obs.y, mean, cov, obs.mask)
                if not bool(torch.isfinite(loss)) or not bool(torch.isfinite(mean).all()):
                    raise NonFiniteLossError(
                        f"non-finite prediction for trajectory {traj.traj_id!r} in interval {interval}",
                        traj_id=traj.traj_id,
                        interval=interval,
                    )
            predictions.append(Prediction(t, mean, cov, loss, t - last_seen, n_seen, obs))
        if obs is not None and (condition_until is None or t <= condition_until):
            belief = condition(belief, obs, R, alpha)
            last_seen = t
            n_seen += 1
        if t in boundaries:
            dynamics, step_penalty = model.regime(traj.context, belief, alpha, R, W)
            penalty = penalty + step_penalty
            interval += 1
            if on_regime is not None:
                on_regime(t, dynamics)
    return Rollout(predictions, penalty, interval + 1)


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params):
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])

    def to_json(self):
        return {
            "step": self.step,
            "m": [t.detach().reshape(-1).tolist() for t in self.m],
            "v": [t.detach().reshape(-1).tolist() for t in self.v],
        }

    @classmethod
    def from_json(cls, payload, params):
        m = [as_tensor(vals).reshape(p.shape) for vals, p in zip(payload["m"], params)]
        v = [as_tensor(vals).reshape(p.shape) for vals, p in zip(payload["v"], params)]
        return cls(int(payload["step"]), m, v)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    beta1, beta2 = config.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(config.lr / bc1 * m / (torch.sqrt(v / bc2) + config.eps))
    return params, state


def subsample_observations(observations, prob, rng):
    """Keep each observation with probability ``prob`` (at least one survives)."""
    if prob >= 1.0 or not observations:
        return tuple(observations)
    keep = rng.random(len(observations)) < prob
    if not keep.any():
        keep[rng.integers(len(observations))] = True
    return tuple(obs for obs, flag in zip(observations, keep) if flag)


def _sequence_loss(model, traj, observations=None):
    rollout = unroll(model, traj, observations=observations)
    scored = rollout.scored()
    total = sum((p.nll for p in scored), torch.zeros((), dtype=DTYPE))
    return total, len(scored), rollout.penalty


def _dataset_nll(model, trajectories):
    total, count = 0.0, 0
    with torch.no_grad():
        for traj in trajectories:
            loss, n_obs, _ = _sequence_loss(model, traj)
            total += float(loss)
            count += n_obs
    return total / count if count else math.nan


@dataclass
class BestCheckpoint:
    """Best score seen so far, the epoch it came from and the parameters at that epoch."""

    score: float = math.inf
    epoch: int = -1
    state: dict = None

    def score_json(self):
        return self.score if math.isfinite(self.score) else None


@dataclass
class TrainResult:
    history: pd.DataFrame
    best_state: dict
    opt_state: AdamState
    last_epoch: int
    best_epoch: int
    best_score: float = math.inf


def train(model, train_set, config, val_set=None, opt_state=None, start_epoch=0, on_epoch_end=None,
          progress=False, best=None):
    """
    Mini-batch Adam on the mean per-observation NLL plus the weighted basis
    conditioning penalty. Batches whose loss or gradient is non-finite are
    skipped; ``max_consecutive_skips`` in a row aborts.

    The best-validation (or best-training when no validation set is given)
    parameters are returned in ``best_state``; ``model`` itself holds the
    last-epoch parameters. A resumed run passes the earlier ``best`` so an
    epoch only replaces it by scoring lower. ``on_epoch_end`` receives
    ``(epoch, model, opt_state, row, best)``.
    """
    config.validate()
    trajectories = list(train_set)
    if not trajectories:
        raise ConfigError("training needs a non-empty dataset")
    params = [p for p in model.parameters() if p.requires_grad]
    state = opt_state if opt_state is not None else AdamState.zeros(params)
    rows = []
    if best is None:
        best = BestCheckpoint(math.inf, start_epoch - 1, None)
    best = BestCheckpoint(
        best.score,
        best.epoch,
        copy.deepcopy(model.state_dict()) if best.state is None else best.state,
    )
    skips = 0

    epochs = range(start_epoch, config.epochs)
    for epoch in tqdm(epochs, desc="train", unit="epoch", disable=not progress):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(trajectories))
        epoch_nll, epoch_obs, epoch_penalty, skipped = 0.0, 0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [trajectories[i] for i in order[start:start + config.batch_size]]
            try:
                total = torch.zeros((), dtype=DTYPE)
                penalty = torch.zeros((), dtype=DTYPE)
                count = 0
                for traj in batch:
                    kept = subsample_observations(traj.observations, config.subsample_prob, rng)
                    loss, n_obs, pen = _sequence_loss(model, traj, kept)
                    total = total + loss
                    penalty = penalty + pen
                    count += n_obs
                penalty = penalty / len(batch)
                objective = total / max(count, 1) + config.penalty_weight * penalty
                if not bool(torch.isfinite(objective)):
                    raise NonFiniteLossError("non-finite batch objective")
                grads = torch.autograd.grad(objective, params, allow_unused=True)
                grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
                if not all(bool(torch.isfinite(g).all()) for g in grads):
                    raise NonFiniteLossError("non-finite gradient")
            except NumericError as exc:
                skips += 1
                skipped += 1
                logger.warning(
                    "epoch %d: skipped batch at offset %d (trajectory %s, interval %s): %s",
                    epoch, start, getattr(exc, "traj_id", None), getattr(exc, "interval", None), exc,
                )
                if skips >= config.max_consecutive_skips:
                    raise TrainingAbortedError(f"{skips} consecutive batches skipped") from exc
                continue
            skips = 0
            adam_step(params, grads, state, config)
            epoch_nll += float(total.detach())
            epoch_obs += count
            epoch_penalty += float(penalty.detach()) * len(batch)

        train_nll = epoch_nll / epoch_obs if epoch_obs else math.nan
        val_nll = _dataset_nll(model, val_set) if val_set is not None and len(val_set) else math.nan
        row = {
            "epoch": epoch,
            "train_nll": train_nll,
            "val_nll": val_nll,
            "penalty": epoch_penalty / len(trajectories),
        }
        rows.append(row)
        logger.info(
            "epoch %d train_nll=%.5f val_nll=%.5f penalty=%.3g skipped=%d",
            epoch, train_nll, val_nll, row["penalty"], skipped,
        )
        score = val_nll if math.isfinite(val_nll) else train_nll
        if math.isfinite(score) and score < best.score:
            best = BestCheckpoint(score, epoch, copy.deepcopy(model.state_dict()))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, state, row, best)

    history = pd.DataFrame(rows, columns=["epoch", "train_nll", "val_nll", "penalty"])
    return TrainResult(history, best.state, state, config.epochs - 1, best.epoch, best.score)


def naive_baseline(observations, condition_until=None):
    """
    Last observed value per coordinate before each observation (NaN when
    the coordinate has not been seen yet). Observations after
    ``condition_until`` do not update the baseline.
    """
    if not observations:
        return []
    last = np.full(observations[0].m, np.nan)
    out = []
    for obs in observations:
        out.append(last.copy())
        if condition_until is None or obs.t <= condition_until:
            seen = obs.mask.numpy()
            last[seen] = obs.y.numpy()[seen]
    return out


@dataclass
class EvaluationReport:
    """Headline metrics plus plot-ready tables."""

    mse: float
    nll: float
    naive_mse: float
    model_mse_naive_subset: float
    per_prediction: pd.DataFrame
    per_horizon: pd.DataFrame
    per_seen: pd.DataFrame

    def summary_table(self):
        return pd.DataFrame([
            {"model": "eigensde", "mse": self.mse, "nll": self.nll, "mse_naive_subset": self.model_mse_naive_subset},
            {"model": "naive", "mse": math.nan, "nll": math.nan, "mse_naive_subset": self.naive_mse},
        ])

    def as_dict(self):
        return {
            "mse": self.mse,
            "nll": self.nll,
            "naive_mse": self.naive_mse,
            "model_mse_naive_subset": self.model_mse_naive_subset,
            "n_predictions": int(len(self.per_prediction)),
        }


PER_PREDICTION_COLUMNS = [
    "traj_id", "t", "dim", "horizon", "n_seen", "y_true", "y_pred", "var_pred", "nll", "y_naive",
]


def evaluate(model, dataset, horizon_bins=DEFAULT_HORIZON_BINS, condition_until=None):
    """
    Score pre-filter predictions at observation times.

    With ``condition_until`` only observations after the cut are scored
    (the earlier ones are absorbed). Trajectories with fewer than two
    observations are skipped.
    """
    rows = []
    with torch.no_grad():
        for traj in dataset:
            if len(traj.observations) < 2:
                logger.debug("skipping trajectory %s with < 2 observations", traj.traj_id)
                continue
            rollout = unroll(model, traj, condition_until=condition_until)
            naive = dict(zip(
                (obs.t for obs in traj.observations),
                naive_baseline(traj.observations, condition_until),
            ))
            for pred in rollout.scored():
                obs = pred.observation
                if condition_until is not None and obs.t <= condition_until:
                    continue
                variances = torch.diagonal(pred.cov)
                for dim in obs.observed.tolist():
                    rows.append({
                        "traj_id": traj.traj_id,
                        "t": obs.t,
                        "dim": dim,
                        "horizon": pred.horizon,
                        "n_seen": pred.n_seen,
                        "y_true": float(obs.y[dim]),
                        "y_pred": float(pred.mean[dim]),
                        "var_pred": float(variances[dim]),
                        "nll": float(pred.nll),
                        "y_naive": float(naive[obs.t][dim]),
                    })
    table = pd.DataFrame(rows, columns=PER_PREDICTION_COLUMNS)
    return report_from_predictions(table, horizon_bins)


def report_from_predictions(table, horizon_bins=DEFAULT_HORIZON_BINS):
    """Aggregate a per-prediction table into an EvaluationReport."""
    table = table.copy()
    table["sq_err"] = (table["y_true"] - table["y_pred"]) ** 2
    table["naive_sq_err"] = (table["y_true"] - table["y_naive"]) ** 2
    events = table.drop_duplicates(["traj_id", "t"])
    comparable = table[table["y_naive"].notna()]

    table["horizon_bin"] = pd.cut(table["horizon"], bins=list(horizon_bins), include_lowest=True)
    per_horizon = (
        table.groupby("horizon_bin", observed=False)
        .agg(count=("sq_err", "size"), mse=("sq_err", "mean"), naive_mse=("naive_sq_err", "mean"))
        .reset_index()
    )
    per_horizon["horizon_bin"] = per_horizon["horizon_bin"].astype(str)
    per_seen = (
        table.groupby("n_seen")
        .agg(count=("sq_err", "size"), mse=("sq_err", "mean"))
        .join(events.groupby("n_seen").agg(nll=("nll", "mean")))
        .reset_index()
    )
    return EvaluationReport(
        mse=float(table["sq_err"].mean()) if len(table) else math.nan,
        nll=float(events["nll"].mean()) if len(events) else math.nan,
        naive_mse=float(comparable["naive_sq_err"].mean()) if len(comparable) else math.nan,
        model_mse_naive_subset=float(comparable["sq_err"].mean()) if len(comparable) else math.nan,
        per_prediction=table[PER_PREDICTION_COLUMNS],
        per_horizon=per_horizon,
        per_seen=per_seen,
    )
