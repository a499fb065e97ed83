"""
eigensde Closed-Form SDE Propagation
====================================

Exact Gaussian propagation through a linear SDE regime

    dX' = (A X' + B u) dt + dW,     Cov(dW) = Q dt

where ``X' = X - alpha`` is the centered state and ``u`` is piecewise
constant. Both the control and the diffusion integrals reduce to the two
scalar primitives

    C(c, w, T) = int_0^T exp(c s) cos(w s) ds
    S(c, w, T) = int_0^T exp(c s) sin(w s) ds

evaluated per coordinate (control) or per coordinate pair (diffusion)
in the eigenbasis, so real and complex-conjugate spectra share one code
path. A moment-ODE integrator and left-Riemann integrals are provided as
independent oracles.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ScheduleError, ScheduleGapError, TimeReversalError
from .log import get_logger
from .spectral import (
    DTYPE,
    as_tensor,
    clamped_exp,
    exp_generator,
    rotation_generator,
)

logger = get_logger(__name__)

SERIES_GUARD = 1e-6
TIME_TOL = 1e-12


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of the centered latent state at time ``t``."""

    mu: torch.Tensor
    sigma: torch.Tensor
    t: float

    def __post_init__(self):
        mu = as_tensor(self.mu).reshape(-1)
        sigma = as_tensor(self.sigma)
        if sigma.shape != (mu.shape[0], mu.shape[0]):
            raise ConfigError(f"sigma must be {mu.shape[0]}x{mu.shape[0]}, got {tuple(sigma.shape)}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "t", float(self.t))

    @property
    def n(self):
        return int(self.mu.shape[0])


@dataclass(frozen=True)
class ControlSegment:
    """Control ``u`` held constant on ``[t0, t1)``."""

    t0: float
    t1: float
    u: torch.Tensor

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ScheduleError(f"control segment needs t0 < t1, got [{self.t0}, {self.t1})")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "u", as_tensor(self.u).reshape(-1))

    def to_json(self):
        return {"t0": self.t0, "t1": self.t1, "u": self.u.tolist()}


def symmetrize(matrix):
    return 0.5 * (matrix + matrix.T)


def check_schedule(schedule):
    """Raise ScheduleError unless segments are sorted and non-overlapping."""
    for previous, current in zip(schedule, schedule[1:]):
        if current.t0 < previous.t1 - TIME_TOL:
            raise ScheduleError(
                f"control segments overlap or are unsorted: "
                f"[{previous.t0}, {previous.t1}) then [{current.t0}, {current.t1})"
            )


def control_pieces(schedule, t0, t1, k, strict=False):
    """
    Split ``[t0, t1)`` into pieces of constant control.

    Spans not covered by any segment get ``u = 0`` unless ``strict`` is
    set, in which case they raise ScheduleGapError.

    Returns:
    --------
    list of (start, end, u)
    """
    check_schedule(schedule)
    pieces = []
    cursor = float(t0)

    def fill(until):
        if until - cursor <= TIME_TOL:
            return
        if strict:
            raise ScheduleGapError(f"no control segment covers [{cursor}, {until})")
        pieces.append((cursor, until, torch.zeros(k, dtype=DTYPE)))

    for segment in schedule:
        if segment.t1 <= cursor + TIME_TOL:
            continue
        if segment.t0 >= t1 - TIME_TOL:
            break
        if segment.t0 > cursor:
            fill(segment.t0)
            cursor = segment.t0
        end = min(segment.t1, float(t1))
        if segment.u.shape[0] != k:
            raise ConfigError(f"control has {segment.u.shape[0]} channels, expected {k}")
        pieces.append((cursor, end, segment.u))
        cursor = end
    fill(float(t1))
    return pieces


def exp_trig_integral(c, omega, delta):
    """
    Elementwise ``C + iS = (exp(z T) - 1) / z`` with ``z = c + i omega``.

    Falls back to a third-order series when ``|z| T < 1e-6`` (this covers
    the zero eigenvalue and sums of conjugate imaginary pairs).
    """
    delta = as_tensor(delta)
    zc, zw = c * delta, omega * delta
    small = (zc * zc + zw * zw) < SERIES_GUARD ** 2
    denom = torch.where(small, torch.ones_like(zc), c * c + omega * omega)
    growth = clamped_exp(zc)
    ec, es = growth * torch.cos(zw), growth * torch.sin(zw)
    C = torch.where(
        small,
        delta * (1.0 + zc / 2.0 + (zc * zc - zw * zw) / 6.0),
        (c * (ec - 1.0) + omega * es) / denom,
    )
    S = torch.where(
        small,
        delta * (zw / 2.0 + zc * zw / 3.0),
        (c * es - omega * (ec - 1.0)) / denom,
    )
    return C, S


def _elapsed(t0, t):
    delta = float(t) - float(t0)
    if delta < -TIME_TOL:
        raise TimeReversalError(f"cannot integrate backwards from t={t0} to t={t}")
    return max(delta, 0.0)


def transfer_matrix(spectrum, basis, delta, basis_inv=None):
    """exp(A delta) = V exp(D delta) V^-1."""
    if basis_inv is None:
        basis_inv = basis.inverse()
    return basis.V @ exp_generator(spectrum, delta) @ basis_inv


def control_integral_analytic(spectrum, basis, u, B, t0, t, basis_inv=None):
    """
    Mean contribution ``int_t0^t exp(A (t - s)) B u ds`` of a constant control,
    in the stabilized form ``V (int_0^T exp(D s) ds) V^-1 B u``.
    """
    delta = _elapsed(t0, t)
    if basis_inv is None:
        basis_inv = basis.inverse()
    a, b = spectrum.coordinate_rates()
    C, S = exp_trig_integral(a, b, delta)
    J = rotation_generator(spectrum.n_real, spectrum.n_complex)
    w = basis_inv @ (as_tensor(B) @ as_tensor(u).reshape(-1))
    return basis.V @ (C * w + S * (J @ w))


def noise_integral_analytic(spectrum, basis, Q, t0, t, basis_inv=None):
    """
    Covariance contribution ``int_0^T exp(A s) Q exp(A s)^T ds``.

    In the eigenbasis the integrand is ``exp(D s) Qt exp(D s)^T`` with
    ``Qt = V^-1 Q V^-T``. Each entry (i, j) expands into the four products
    of cos/sin of coordinates i and j, which fold into C and S primitives
    at rate ``a_i + a_j`` and frequencies ``b_i - b_j`` and ``b_i + b_j``.
    Real-real entries reduce to ``Qt_ij (exp((a_i + a_j) T) - 1) / (a_i + a_j)``.
    """
    delta = _elapsed(t0, t)
    if basis_inv is None:
        basis_inv = basis.inverse()
    Qt = basis_inv @ as_tensor(Q) @ basis_inv.T
    J = rotation_generator(spectrum.n_real, spectrum.n_complex)
    a, b = spectrum.coordinate_rates()
    rate = a.unsqueeze(1) + a.unsqueeze(0)
    C_minus, S_minus = exp_trig_integral(rate, b.unsqueeze(1) - b.unsqueeze(0), delta)
    C_plus, S_plus = exp_trig_integral(rate, b.unsqueeze(1) + b.unsqueeze(0), delta)
    K = (
        Qt * (C_minus + C_plus)
        + (Qt @ J.T) * (S_plus - S_minus)
        + (J @ Qt) * (S_plus + S_minus)
        + (J @ Qt @ J.T) * (C_minus - C_plus)
    ) / 2.0
    return symmetrize(basis.V @ K @ basis.V.T)


def _transfer_batch(spectrum, basis, basis_inv, lags):
    """Stack of exp(A s) for a vector of lags s, shape (N, n, n)."""
    a, b = spectrum.coordinate_rates()
    J = rotation_generator(spectrum.n_real, spectrum.n_complex)
    s = lags.unsqueeze(1)
    growth = clamped_exp(a * s)
    blocks = torch.diag_embed(growth * torch.cos(b * s)) + (growth * torch.sin(b * s)).unsqueeze(-1) * J
    return basis.V @ blocks @ basis_inv


def _riemann_grid(t0, t, dt):
    if not dt > 0:
        raise ConfigError(f"Riemann step must be positive, got {dt}")
    delta = _elapsed(t0, t)
    count = max(1, math.ceil(delta / dt - 1e-9))
    nodes = float(t0) + dt * np.arange(count)
    widths = np.diff(np.append(nodes, float(t)))
    return nodes, widths


def control_integral_numeric(spectrum, basis, u_fn, B, t0, t, dt):
    """Left-Riemann sum of ``exp(A (t - s)) B u(s)`` on a grid of step ``dt``."""
    nodes, widths = _riemann_grid(t0, t, dt)
    basis_inv = basis.inverse()
    U = torch.as_tensor(np.array([np.asarray(u_fn(s), dtype=float).reshape(-1) for s in nodes]), dtype=DTYPE)
    kernels = _transfer_batch(spectrum, basis, basis_inv, as_tensor(float(t) - nodes))
    forcing = U @ as_tensor(B).T
    summands = (kernels @ forcing.unsqueeze(-1)).squeeze(-1) * as_tensor(widths).unsqueeze(1)
    return summands.sum(dim=0)


def noise_integral_numeric(spectrum, basis, Q, t0, t, dt):
    """Left-Riemann sum of ``exp(A s) Q exp(A s)^T`` over ``s`` in ``[0, t - t0)``."""
    nodes, widths = _riemann_grid(0.0, _elapsed(t0, t), dt)
    kernels = _transfer_batch(spectrum, basis, basis.inverse(), as_tensor(nodes))
    summands = kernels @ as_tensor(Q) @ kernels.transpose(1, 2)
    return symmetrize((summands * as_tensor(widths).reshape(-1, 1, 1)).sum(dim=0))


def transition(dyn, schedule, t0, t1, strict=False):
    """
    Exact linear-Gaussian transition of the centered state over ``[t0, t1]``:
    ``X'(t1) | X'(t0) = x  ~  N(G x + offset, noise)``.
    """
    _elapsed(t0, t1)
    n, k = dyn.n, dyn.k
    basis_inv = dyn.basis.inverse()
    G = torch.eye(n, dtype=DTYPE)
    offset = torch.zeros(n, dtype=DTYPE)
    noise = torch.zeros((n, n), dtype=DTYPE)
    for start, end, u in control_pieces(schedule, t0, t1, k, strict=strict):
        step = transfer_matrix(dyn.spectrum, dyn.basis, end - start, basis_inv)
        drive = control_integral_analytic(dyn.spectrum, dyn.basis, u, dyn.B, start, end, basis_inv)
        diffusion = noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, start, end, basis_inv)
        G = step @ G
        offset = step @ offset + drive
        noise = step @ noise @ step.T + diffusion
    return G, offset, symmetrize(noise)


def propagate(belief, dyn, schedule, t_target, strict=False):
    """
    Push a centered Gaussian belief forward to ``t_target`` under one regime.

    Raises
    ------
    TimeReversalError
        If ``t_target`` precedes the belief time.
    ScheduleGapError
        In strict mode, when the schedule leaves part of the span uncovered.
    """
    if float(t_target) < belief.t - TIME_TOL:
        raise TimeReversalError(f"cannot propagate from t={belief.t} back to t={t_target}")
    t_target = max(float(t_target), belief.t)
    G, offset, noise = transition(dyn, schedule, belief.t, t_target, strict=strict)
    return GaussianBelief(
        mu=G @ belief.mu + offset,
        sigma=symmetrize(G @ belief.sigma @ G.T + noise),
        t=t_target,
    )


def moment_ode_oracle(dyn, schedule, belief, t_target, step=1e-3):
    """
    RK4 integration of the moment equations

        d mu / dt    = A mu + B u
        d Sigma / dt = A Sigma + Sigma A^T + Q

    in numpy, independently of the spectral machinery except for A.
    """
    if not 0 < step <= 1e-3:
        raise ConfigError(f"moment ODE step must lie in (0, 1e-3], got {step}")
    A = dyn.A.detach().numpy()
    B = dyn.B.detach().numpy()
    Q = dyn.Q.detach().numpy()
    mu = belief.mu.detach().numpy().copy()
    sigma = belief.sigma.detach().numpy().copy()

    def rates(m, s, forcing):
        return A @ m + forcing, A @ s + s @ A.T + Q

    for start, end, u in control_pieces(schedule, belief.t, t_target, dyn.k):
        forcing = B @ u.detach().numpy()
        count = max(1, math.ceil((end - start) / step - 1e-9))
        h = (end - start) / count
        for _ in range(count):
            k1 = rates(mu, sigma, forcing)
            k2 = rates(mu + h / 2 * k1[0], sigma + h / 2 * k1[1], forcing)
            k3 = rates(mu + h / 2 * k2[0], sigma + h / 2 * k2[1], forcing)
            k4 = rates(mu + h * k3[0], sigma + h * k3[1], forcing)
            mu = mu + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            sigma = sigma + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            sigma = 0.5 * (sigma + sigma.T)
    return GaussianBelief(mu, sigma, max(float(t_target), belief.t))


def predict_observable(belief, alpha, R):
    """Distribution of the observed signal: ``N((mu + alpha)[:m], Sigma[:m, :m] + R)``."""
    R = as_tensor(R)
    if R.ndim == 1:
        R = torch.diag(R)
    m = R.shape[0]
    if m > belief.n:
        raise ConfigError(f"cannot observe {m} coordinates of a {belief.n}-dim state")
    mean = (belief.mu + as_tensor(alpha))[:m]
    return mean, belief.sigma[:m, :m] + R
