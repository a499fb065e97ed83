"""
eigensde Synthetic Benchmarks
=============================

Ground-truth simulators and dataset generators. Every generator samples
the exact Gaussian transitions of its linear SDE (no Euler bias) and
writes the ground-truth regime into the dataset header so oracle
evaluation never needs to regenerate the data.

Generators:
    gen_section5   closed-loop controlled 2-dim system, latent control entry
    gen_coupled    regular observations, fast control ticks on the true signal
    gen_spectrum   open-loop studies of the A1 / A2 / A3 spectra
    gen_ou         sparsely observed 2-dim Ornstein-Uhlenbeck process
    gen_dosing     context-dependent compartment model under feedback dosing
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .datasets import Dataset, Trajectory
from .errors import ConfigError
from .esde import (
    ControlSegment,
    control_integral_analytic,
    control_pieces,
    noise_integral_analytic,
    transfer_matrix,
)
from .filtering import Observation
from .log import get_logger
from .spectral import SpectralDynamics, check_psd, decompose

logger = get_logger(__name__)

A1 = ((-0.5, -2.0), (2.0, -1.0))
A2 = ((-0.5, -0.5), (-0.5, -1.0))
A3 = ((1.0, -2.0), (2.0, -1.0))
SPECTRUM_MATRICES = {"A1": A1, "A2": A2, "A3": A3}
MODE_MATRICES = {"complex": A1, "real": A2}

OU_WIENER_COV = ((1.0, 0.5), (0.5, 1.0))
OU_THETA = 1.0
OU_SAMPLE_RATE = 0.6
OU_CENTER_RANGE = (-1.0, 1.0)
OU_CONDITION_UNTIL = 4.0


@dataclass(frozen=True)
class GeneratorConfig:
    """
    Shared generator settings.

    ``obs_per_traj`` is an inclusive (low, high) range; equal bounds fix
    the count (sparsity variants). ``observation_noise`` is the variance
    of the noise added to each observed coordinate.
    """

    n_traj: int = 1000
    mode: str = "complex"
    coupling: float = -0.5
    obs_per_traj: tuple = (5, 15)
    support: float = 10.0
    seed: int = 0
    b_segments: int = 10
    b_range: tuple = (0.0, 0.5)
    control_ticks: int = 10
    observation_noise: float = 0.0
    diffusion: float = 0.1
    time_scale: float = 1.0
    truth_step: float = 0.1
    control_dt: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "obs_per_traj", tuple(int(v) for v in self.obs_per_traj))
        object.__setattr__(self, "b_range", tuple(float(v) for v in self.b_range))

    def validate(self):
        low, high = self.obs_per_traj
        if self.support <= 0:
            raise ConfigError(f"support must be positive, got {self.support}")
        if low < 2 or high < low:
            raise ConfigError(f"obs_per_traj must satisfy 2 <= low <= high, got {self.obs_per_traj}")
        if self.mode not in MODE_MATRICES:
            raise ConfigError(f"mode must be one of {sorted(MODE_MATRICES)}, got {self.mode!r}")
        if self.n_traj < 0 or self.b_segments < 1 or self.control_ticks < 1:
            raise ConfigError("n_traj must be >= 0 and b_segments, control_ticks >= 1")
        if self.observation_noise < 0 or self.diffusion < 0 or self.truth_step <= 0 or self.control_dt <= 0:
            raise ConfigError("noise levels must be >= 0 and time steps positive")
        return self

    def to_json(self):
        payload = asdict(self)
        payload["obs_per_traj"] = list(self.obs_per_traj)
        payload["b_range"] = list(self.b_range)
        return payload


class ExactStepper:
    """
    Samples exact transitions of one regime. Transfer, control gain and
    noise covariance depend only on the step length and are cached per
    length. The noise is symmetrized and its negative round-off
    eigenvalues are clipped to zero before it is used for sampling.
    """

    def __init__(self, dyn):
        self.dyn = dyn
        self.alpha = dyn.alpha.detach().numpy()
        self._cache = {}

    def _build(self, delta):
        dyn = self.dyn
        basis_inv = dyn.basis.inverse()
        G = transfer_matrix(dyn.spectrum, dyn.basis, delta, basis_inv)
        gain = torch.stack([
            control_integral_analytic(dyn.spectrum, dyn.basis, unit, dyn.B, 0.0, delta, basis_inv)
            for unit in torch.eye(dyn.k, dtype=G.dtype)
        ], dim=1)
        noise = noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, 0.0, delta, basis_inv)
        check_psd(noise, f"transition noise over {delta}")
        noise = noise.detach().numpy()
        values, vectors = np.linalg.eigh(0.5 * (noise + noise.T))
        factor = vectors * np.sqrt(np.clip(values, 0.0, None))
        return G.detach().numpy(), gain.detach().numpy(), factor @ factor.T, factor

    def operators(self, delta):
        """(transfer, control gain, PSD noise covariance) for a step of length ``delta``."""
        key = round(float(delta), 12)
        if key not in self._cache:
            self._cache[key] = self._build(delta)
        return self._cache[key][:3]

    def advance(self, x, delta, u, rng):
        """Draw X(t + delta) given X(t) = x (raw coordinates) and constant u."""
        if delta <= 0:
            return x
        G, gain, _ = self.operators(delta)
        factor = self._cache[round(float(delta), 12)][3]
        mean = G @ (x - self.alpha) + gain @ np.asarray(u, dtype=float) + self.alpha
        return mean + factor @ rng.standard_normal(mean.size)


def simulate_linear_sde(dyn, schedule, x0, t_grid, rng):
    """
    Dense path of the raw state on ``t_grid`` (``x0`` at ``t_grid[0]``),
    sampled through exact transitions between consecutive grid points.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0):
        raise ConfigError("t_grid must be sorted")
    stepper = ExactStepper(dyn)
    path = np.empty((t_grid.size, dyn.n))
    x = np.asarray(x0, dtype=float)
    path[0] = x
    for i in range(1, t_grid.size):
        for start, end, u in control_pieces(list(schedule), t_grid[i - 1], t_grid[i], dyn.k):
            x = stepper.advance(x, end - start, u.numpy(), rng)
        path[i] = x
    return path


def regime_from_matrix(A, diffusion, B, alpha=None, R=None, B_mask=None):
    spectrum, basis = decompose(np.asarray(A, dtype=float))
    n = spectrum.n
    return SpectralDynamics(
        spectrum=spectrum,
        basis=basis,
        Q=diffusion * np.eye(n) if np.isscalar(diffusion) else diffusion,
        alpha=np.zeros(n) if alpha is None else alpha,
        B=B,
        R=np.zeros((1, 1)) if R is None else R,
        B_mask=B_mask,
    ).validate()


def _observe(x, m, noise_var, rng, mask=None):
    y = x[:m].copy()
    if noise_var > 0:
        y = y + rng.normal(scale=math.sqrt(noise_var), size=m)
    if mask is not None:
        y = np.where(mask, y, 0.0)
    return y


def simulate_episode(dyn, rng, x0, obs_times, tick_times, policy, support,
                     truth_step=0.1, noise_var=0.0, masks=None):
    """
    Closed-loop simulation of one trajectory.

    ``policy(t, last_y, x)`` is called at every control tick and returns the
    control held until the next tick; ``last_y`` is the latest observed
    value (NaN before the first observation) and ``x`` the true state.
    Observations at a tick are taken before the control is recomputed.

    Returns:
    --------
    (observations, control segments, truth samples)
    """
    m = dyn.m
    stepper = ExactStepper(dyn)
    truth_times = np.round(np.arange(0.0, support + 1e-9, truth_step), 12)
    obs_index = {float(t): i for i, t in enumerate(obs_times)}
    ticks = set(float(t) for t in tick_times)
    truth_set = set(float(t) for t in truth_times)
    events = sorted(set(obs_index) | ticks | truth_set | {0.0, float(support)})

    x = np.asarray(x0, dtype=float)
    last_y = np.full(m, np.nan)
    u = np.zeros(dyn.k)
    segment_start = 0.0
    t_prev = 0.0
    observations, segments, truth = [], [], []

    for t in events:
        x = stepper.advance(x, t - t_prev, u, rng)
        t_prev = t
        if t in obs_index:
            mask = None if masks is None else masks[obs_index[t]]
            y = _observe(x, m, noise_var, rng, mask)
            observations.append(Observation(t, y, mask))
            seen = np.ones(m, dtype=bool) if mask is None else np.asarray(mask)
            last_y[seen] = y[seen]
        if t in truth_set:
            truth.append((t, tuple(float(v) for v in x[:m])))
        if t in ticks or t >= support:
            if t > segment_start:
                segments.append(ControlSegment(segment_start, t, u))
            if t < support:
                u = np.asarray(policy(t, last_y, x), dtype=float).reshape(dyn.k)
                segment_start = t
    return observations, segments, tuple(truth)


def _uniform_times(rng, count, support):
    times = np.sort(rng.uniform(0.0, support, count))
    while np.any(np.diff(times) <= 0) or times[0] <= 0:
        times = np.sort(rng.uniform(0.0, support, count))
    return [float(t) for t in times]


def _piecewise_lookup(values, support):
    width = support / len(values)

    def value_at(t):
        return values[min(int(t / width + 1e-9), len(values) - 1)]
    return value_at


def _header(generator, cfg, dyn, model_hint, **extra):
    ground_truth = dyn.to_json()
    ground_truth["eigenvalues"] = [[v.real, v.imag] for v in dyn.spectrum.eigenvalues()]
    return {
        "generator": generator,
        "config": cfg.to_json(),
        "ground_truth": ground_truth,
        "model_hint": model_hint,
        **extra,
    }


def _section5_regime(A, cfg):
    A = cfg.time_scale * np.asarray(A, dtype=float)
    return regime_from_matrix(
        A, cfg.diffusion, B=[[0.0], [1.0]], R=[[cfg.observation_noise]], B_mask=[True, False]
    )


def _latent_control_hint(n_complex):
    return {"n": 2, "m": 1, "k": 1, "n_complex_pairs": n_complex, "context_dim": 1, "B_mask": [True, False]}


def _gen_controlled(cfg, A, generator, regular_times=False, tick_dt=None, feedback_on_truth=False):
    cfg.validate()
    dyn = _section5_regime(A, cfg)
    trajectories = []
    for i in range(cfg.n_traj):
        rng = np.random.default_rng([cfg.seed, i])
        count = int(rng.integers(cfg.obs_per_traj[0], cfg.obs_per_traj[1] + 1))
        if regular_times:
            obs_times = [float(t) for t in np.linspace(0.0, cfg.support, count + 1)[1:]]
        else:
            obs_times = _uniform_times(rng, count, cfg.support)
        b_values = rng.uniform(cfg.b_range[0], cfg.b_range[1], cfg.b_segments)
        b_at = _piecewise_lookup(b_values, cfg.support)
        if tick_dt is None:
            ticks = np.linspace(0.0, cfg.support, cfg.control_ticks, endpoint=False)
        else:
            ticks = np.round(np.arange(0.0, cfg.support - 1e-9, tick_dt), 12)

        def policy(t, last_y, x, b_at=b_at):
            signal = x[0] if feedback_on_truth else (0.0 if np.isnan(last_y[0]) else last_y[0])
            return [b_at(t) + cfg.coupling * signal]

        x0 = rng.normal(size=2)
        obs, segments, truth = simulate_episode(
            dyn, rng, x0, obs_times, ticks, policy, cfg.support, cfg.truth_step, cfg.observation_noise
        )
        trajectories.append(Trajectory([1.0], obs, segments, truth, traj_id=str(i)))
    header = _header(
        generator, cfg, dyn, _latent_control_hint(dyn.spectrum.n_complex),
        x0_mean=[0.0, 0.0], x0_cov=np.eye(2).tolist(),
    )
    logger.info("%s: %d trajectories, eigenvalues %s", generator, len(trajectories), header["ground_truth"]["eigenvalues"])
    return Dataset(header, trajectories)


def gen_section5(cfg):
    """
    2-dim system with dim 1 observed noiselessly at uniform random times and
    control entering only the latent dim. Control is recomputed at
    ``control_ticks`` evenly spaced times as ``b_t + coupling * latest Y``.
    """
    return _gen_controlled(cfg, MODE_MATRICES[cfg.mode], "section5")


def gen_coupled(cfg):
    """Regular observation times; control ticks every ``control_dt`` using the true Y."""
    return _gen_controlled(cfg, MODE_MATRICES[cfg.mode], "coupled", regular_times=True,
                           tick_dt=cfg.control_dt, feedback_on_truth=True)


def gen_spectrum(which, n_traj=200, obs_range=(5, 20), seed=0, support=10.0):
    """Open-loop study of one of the A1 / A2 / A3 dynamics matrices."""
    if which not in SPECTRUM_MATRICES:
        raise ConfigError(f"unknown spectrum study {which!r}; choose from {sorted(SPECTRUM_MATRICES)}")
    cfg = GeneratorConfig(n_traj=n_traj, coupling=0.0, obs_per_traj=obs_range, seed=seed, support=support)
    dataset = _gen_controlled(cfg, SPECTRUM_MATRICES[which], f"spectrum-{which}")
    dataset.header["study"] = which
    return dataset


def gen_ou(cfg):
    """
    2-dim OU process ``dX = theta (mu - X) dt + dW`` with Cov(dW) = [[1, .5], [.5, 1]] dt,
    Poisson observation times at rate 0.6, random non-empty coordinate masks
    and a per-trajectory center mu ~ U[-1, 1]^2. The stationary start is
    ``X0 ~ N(mu, Cov / (2 theta))``.
    """
    cfg.validate()
    cov = np.asarray(OU_WIENER_COV)
    base = regime_from_matrix(-OU_THETA * np.eye(2), cov, B=[[0.0], [0.0]], R=np.zeros((2, 2)))
    trajectories = []
    for i in range(cfg.n_traj):
        rng = np.random.default_rng([cfg.seed, i])
        center = rng.uniform(*OU_CENTER_RANGE, size=2)
        dyn = replace(base, alpha=torch.as_tensor(center))
        obs_times = []
        while len(obs_times) < 2:
            count = rng.poisson(OU_SAMPLE_RATE * cfg.support)
            obs_times = _uniform_times(rng, count, cfg.support) if count >= 2 else []
        masks = []
        for _ in obs_times:
            mask = rng.random(2) < 0.5
            while not mask.any():
                mask = rng.random(2) < 0.5
            masks.append(mask)
        x0 = rng.multivariate_normal(center, cov / (2 * OU_THETA))
        obs, segments, truth = simulate_episode(
            dyn, rng, x0, obs_times, [], lambda t, y, x: [0.0], cfg.support,
            cfg.truth_step, cfg.observation_noise, masks,
        )
        trajectories.append(Trajectory([1.0], obs, segments, truth, traj_id=str(i)))
    header = _header(
        "ou", cfg, base,
        {"n": 4, "m": 2, "k": 1, "n_complex_pairs": 0, "context_dim": 1, "B_mask": None},
        sample_rate=OU_SAMPLE_RATE,
        wiener_cov=cov.tolist(),
        theta=OU_THETA,
        center_range=list(OU_CENTER_RANGE),
        eval_condition_until=OU_CONDITION_UNTIL,
    )
    return Dataset(header, trajectories)


@dataclass(frozen=True)
class DosingEnvConfig:
    """
    Compartment-model dosing simulator. Dose enters the depot compartment;
    the observed signal (coordinate 1) is the effect compartment, which
    the dose never reaches directly.
    """

    context_dim: int = 3
    lab_gap: tuple = (2.0, 6.0)
    target_band: tuple = (0.8, 1.2)
    baseline: float = 0.3
    diffusion: float = 0.01
    observation_noise: float = 0.01
    support: float = 48.0
    dose_interval: float = 1.0
    max_dose: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "lab_gap", tuple(float(v) for v in self.lab_gap))
        object.__setattr__(self, "target_band", tuple(float(v) for v in self.target_band))

    def validate(self):
        if self.context_dim < 3:
            raise ConfigError("the dosing simulator needs a context of at least 3 features")
        if not 0 < self.lab_gap[0] <= self.lab_gap[1]:
            raise ConfigError(f"lab_gap must be a positive range, got {self.lab_gap}")
        if self.target_band[0] > self.target_band[1]:
            raise ConfigError(f"target_band is empty: {self.target_band}")
        return self

    def to_json(self):
        payload = asdict(self)
        payload["lab_gap"] = list(self.lab_gap)
        payload["target_band"] = list(self.target_band)
        return payload


@dataclass(frozen=True)
class DosingEnvState:
    """Hidden state of one episode; ``x`` is never part of an Observation."""

    x: np.ndarray
    t: float
    context: np.ndarray
    dynamics: SpectralDynamics
    rng: np.random.Generator
    next_lab: float
    config: DosingEnvConfig
    reward: float = 0.0
    stepper: ExactStepper = field(default=None, repr=False)


def dosing_dynamics(context, env_config):
    """Per-episode regime: absorption, elimination and effect rates scale with the context."""
    c = np.asarray(context, dtype=float)
    absorb = 1.0 * math.exp(0.3 * c[0])
    eliminate = 0.3 * math.exp(0.3 * c[1])
    effect = 0.5 * math.exp(0.3 * c[2])
    distribute, recirculate = 0.2, 0.1
    A = np.array([
        [-effect, effect, 0.0, 0.0],
        [0.0, -eliminate - distribute, absorb, recirculate],
        [0.0, 0.0, -absorb, 0.0],
        [0.0, distribute, 0.0, -recirculate],
    ])
    alpha = np.array([env_config.baseline * (1.0 + 0.2 * c[0]), 0.0, 0.0, 0.0])
    return regime_from_matrix(
        A,
        env_config.diffusion,
        B=[[0.0], [0.0], [1.0], [0.0]],
        alpha=alpha,
        R=[[env_config.observation_noise]],
        B_mask=[True, True, False, True],
    )


def _band_reward(y, band):
    return -float((y - np.clip(y, band[0], band[1])) ** 2)


def dosing_env_reset(env_config, rng, context=None):
    """Start an episode at the resting state of a context-drawn patient."""
    env_config.validate()
    if context is None:
        context = rng.uniform(-1.0, 1.0, env_config.context_dim)
    context = np.asarray(context, dtype=float)
    dyn = dosing_dynamics(context, env_config)
    state = DosingEnvState(
        x=dyn.alpha.numpy().copy(),
        t=0.0,
        context=context,
        dynamics=dyn,
        rng=rng,
        next_lab=float(rng.uniform(*env_config.lab_gap)),
        config=env_config,
        stepper=ExactStepper(dyn),
    )
    return state, context


def dosing_env_step(state, dose, dt):
    """
    Hold ``dose`` for ``dt`` time units. Returns the next state and the lab
    Observation taken inside the step, if any (at most one per step).
    """
    if dose < 0:
        raise ConfigError(f"dose must be non-negative, got {dose}")
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    cfg, rng = state.config, state.rng
    u = [float(dose)]
    end = state.t + dt
    x, next_lab, observation = state.x, state.next_lab, None
    if next_lab <= end:
        x = state.stepper.advance(x, next_lab - state.t, u, rng)
        observation = Observation(next_lab, _observe(x, 1, cfg.observation_noise, rng))
        x = state.stepper.advance(x, end - next_lab, u, rng)
        next_lab = max(next_lab + float(rng.uniform(*cfg.lab_gap)), end + 1e-9)
    else:
        x = state.stepper.advance(x, dt, u, rng)
    reward = _band_reward(x[0], cfg.target_band)
    return replace(state, x=x, t=end, next_lab=next_lab, reward=reward), observation


def feedback_dose(env_config, last_y, gain=2.0):
    """Proportional dosing toward the middle of the target band."""
    target = 0.5 * (env_config.target_band[0] + env_config.target_band[1])
    level = env_config.baseline if np.isnan(last_y) else last_y
    return float(np.clip(1.0 + gain * (target - level), 0.0, env_config.max_dose))


def run_episode(env_config, rng, policy="feedback", dose=1.0, context=None):
    """
    Roll one episode out at ``dose_interval`` resolution.

    Returns:
    --------
    (context, observations, control segments, rows) where each row holds
    t, dose, observed value (NaN without a lab) and reward.
    """
    state, context = dosing_env_reset(env_config, rng, context)
    last_y = math.nan
    observations, segments, rows = [], [], []
    steps = int(round(env_config.support / env_config.dose_interval))
    for _ in range(steps):
        amount = feedback_dose(env_config, last_y) if policy == "feedback" else float(dose)
        t0 = state.t
        state, obs = dosing_env_step(state, amount, env_config.dose_interval)
        segments.append(ControlSegment(t0, state.t, [amount]))
        if obs is not None:
            observations.append(obs)
            last_y = float(obs.y[0])
        rows.append({
            "t": state.t,
            "dose": amount,
            "y_obs": math.nan if obs is None else float(obs.y[0]),
            "reward": state.reward,
        })
    return context, observations, segments, rows


def gen_dosing(cfg, env_config=None):
    """Feedback-dosed episodes with context-dependent ground-truth dynamics."""
    cfg.validate()
    env_config = replace(env_config or DosingEnvConfig(), support=cfg.support).validate()
    trajectories = []
    for i in range(cfg.n_traj):
        rng = np.random.default_rng([cfg.seed, i])
        context, obs, segments, _ = run_episode(env_config, rng)
        trajectories.append(Trajectory(context, obs, segments, None, traj_id=str(i)))
    reference = dosing_dynamics(np.zeros(env_config.context_dim), env_config)
    header = _header(
        "dosing", cfg, reference,
        {"n": 4, "m": 1, "k": 1, "n_complex_pairs": 0, "context_dim": env_config.context_dim,
         "B_mask": [True, False, False, False]},
        env_config=env_config.to_json(),
    )
    return Dataset(header, trajectories)


PRESETS = {
    "section5-complex": (gen_section5, {"mode": "complex", "coupling": -0.5}),
    "section5-real": (gen_section5, {"mode": "real", "coupling": -0.5}),
    "section5-complex-ood": (gen_section5, {"mode": "complex", "coupling": 0.5}),
    "section5-real-ood": (gen_section5, {"mode": "real", "coupling": 0.5}),
    "coupled-sd": (gen_coupled, {"mode": "complex", "coupling": -0.8}),
    "coupled-ood": (gen_coupled, {"mode": "complex", "coupling": 0.8}),
    "ou": (gen_ou, {"coupling": 0.0}),
    "spectrum-A1": ("A1", {"n_traj": 200, "obs_per_traj": (5, 20)}),
    "spectrum-A2": ("A2", {"n_traj": 200, "obs_per_traj": (5, 20)}),
    "spectrum-A3": ("A3", {"n_traj": 200, "obs_per_traj": (5, 20)}),
    "dosing": (gen_dosing, {"support": 48.0}),
}


def generate_preset(name, **overrides):
    """Build a dataset from a named preset; ``overrides`` patch GeneratorConfig."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    generator, defaults = PRESETS[name]
    fields = {**defaults, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        cfg = GeneratorConfig(**fields).validate()
    except TypeError as exc:
        raise ConfigError(f"bad generator setting: {exc}") from exc
    if isinstance(generator, str):
        dataset = gen_spectrum(generator, cfg.n_traj, cfg.obs_per_traj, cfg.seed, cfg.support)
    else:
        dataset = generator(cfg)
    dataset.header["preset"] = name
    return dataset
