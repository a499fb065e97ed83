"""
eigensde Observation Filtering
==============================

Conditioning of the centered Gaussian belief on a noisy, possibly partial
observation of the first m state coordinates. Noisy events use the Kalman
gain with the Joseph-form covariance update; noiseless events use the
Schur complement directly and pin the observed coordinates.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError, SingularInnovationError
from .esde import TIME_TOL, GaussianBelief, symmetrize
from .spectral import DTYPE, as_tensor

MAX_INNOVATION_COND = 1e12
PINNED_VARIANCE = 1e-12


@dataclass(frozen=True)
class Observation:
    """Observed signal ``y`` at time ``t``; ``mask[i]`` marks coordinate i as seen."""

    t: float
    y: torch.Tensor
    mask: torch.Tensor = field(default=None)

    def __post_init__(self):
        y = as_tensor(self.y).reshape(-1)
        if self.mask is None:
            mask = torch.ones(y.shape[0], dtype=torch.bool)
        else:
            mask = torch.as_tensor(self.mask, dtype=torch.bool).reshape(-1)
        if mask.shape != y.shape:
            raise DataError(f"observation mask has {mask.shape[0]} flags for {y.shape[0]} values")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)

    @property
    def m(self):
        return int(self.y.shape[0])

    @property
    def observed(self):
        return torch.nonzero(self.mask).reshape(-1)

    def to_json(self):
        return {
            "t": self.t,
            "y": [float(v) if seen else 0.0 for v, seen in zip(self.y.tolist(), self.mask.tolist())],
            "mask": self.mask.tolist(),
        }

    @classmethod
    def from_json(cls, payload):
        try:
            return cls(payload["t"], payload["y"], payload.get("mask"))
        except KeyError as exc:
            raise DataError(f"observation record is missing {exc}") from exc


def _innovation_solve(S, rhs):
    cond = float(torch.linalg.cond(S.detach()))
    if not np.isfinite(cond) or cond > MAX_INNOVATION_COND:
        raise SingularInnovationError(f"innovation covariance condition {cond:.3e} exceeds 1e12")
    return torch.linalg.solve(S, rhs)


def condition(belief, obs, R, alpha):
    """
    Exact conditional belief given ``obs`` on its masked coordinates.

    The observation is centered by ``alpha[:m]`` first. Coordinates that
    are both noiseless and already pinned (variance <= 1e-12) carry no
    information and are skipped, which makes repeated noiseless
    conditioning idempotent. An event with nothing left to observe returns
    the belief unchanged.

    Raises
    ------
    SingularInnovationError
        When the innovation covariance has condition number above 1e12.
    """
    if abs(belief.t - obs.t) > TIME_TOL:
        raise DataError(f"belief at t={belief.t} cannot absorb an observation at t={obs.t}")
    R = as_tensor(R)
    if R.ndim == 1:
        R = torch.diag(R)
    if R.shape[0] != obs.m or obs.m > belief.n:
        raise ConfigError(f"observation of size {obs.m} does not fit R {tuple(R.shape)} / n={belief.n}")

    sigma = belief.sigma
    variances = torch.diagonal(sigma).detach()
    noise = torch.diagonal(R).detach()
    keep = [
        int(i) for i in obs.observed
        if not (noise[i] == 0 and variances[i] <= PINNED_VARIANCE)
    ]
    if not keep:
        return belief
    idx = torch.tensor(keep, dtype=torch.long)
    centered = (obs.y - as_tensor(alpha)[: obs.m])[idx]
    innovation = centered - belief.mu[idx]
    R_o = R[idx][:, idx]
    cross = sigma[:, idx]

    if bool((R_o.detach() == 0).all()):
        gain = _innovation_solve(sigma[idx][:, idx], cross.T).T
        mu = belief.mu + gain @ innovation
        post = sigma - gain @ cross.T
        seen = torch.zeros(belief.n, dtype=torch.bool)
        seen[idx] = True
        mu = torch.where(seen, belief.mu.index_put((idx,), centered), mu)
        free = (~seen).to(DTYPE)
        post = post * torch.outer(free, free)
    else:
        gain = _innovation_solve(sigma[idx][:, idx] + R_o, cross.T).T
        mu = belief.mu + gain @ innovation
        H = torch.zeros((len(keep), belief.n), dtype=DTYPE)
        H[torch.arange(len(keep)), idx] = 1.0
        residual = torch.eye(belief.n, dtype=DTYPE) - gain @ H
        post = residual @ sigma @ residual.T + gain @ R_o @ gain.T
    return GaussianBelief(mu, symmetrize(post), belief.t)


def condition_by_augmentation(belief, obs, R, alpha):
    """
    Reference conditioning: augment the state with the noisy observation,
    build the joint Gaussian of ``(X', Y_obs)`` and take the Schur complement.
    numpy only; used as a test oracle.
    """
    mu = belief.mu.detach().numpy()
    sigma = belief.sigma.detach().numpy()
    R = np.atleast_2d(np.asarray(as_tensor(R).detach()))
    if R.shape[0] == 1 and obs.m > 1:
        R = np.diag(R.reshape(-1))
    idx = obs.observed.numpy()
    if idx.size == 0:
        return belief
    n = mu.shape[0]
    H = np.zeros((idx.size, n))
    H[np.arange(idx.size), idx] = 1.0
    joint_mean = np.concatenate([mu, H @ mu])
    joint_cov = np.block([
        [sigma, sigma @ H.T],
        [H @ sigma, H @ sigma @ H.T + R[np.ix_(idx, idx)]],
    ])
    y = (obs.y.numpy() - np.asarray(as_tensor(alpha).detach())[: obs.m])[idx]
    cov_xy = joint_cov[:n, n:]
    cov_yy = joint_cov[n:, n:]
    solved = np.linalg.pinv(cov_yy, rcond=1e-13, hermitian=True)
    post_mu = joint_mean[:n] + cov_xy @ solved @ (y - joint_mean[n:])
    post_sigma = joint_cov[:n, :n] - cov_xy @ solved @ cov_xy.T
    return GaussianBelief(post_mu, 0.5 * (post_sigma + post_sigma.T), belief.t)
