"""
eigensde Hypernetwork and Constraint Heads
==========================================

g1(C; theta) maps a sequence context to the flat weight vector of g2.
g2(mu, vec(Sigma); W) emits raw values that the constraint heads turn
into a valid regime (eigenvalues, eigenbasis, diffusion). A separate
prior network maps the context to the initial belief, the offset alpha
and the observation noise R, once per sequence.

Flat weight vectors store, per layer and in order, the weight matrix
(row-major, shape out x in) followed by the bias.
"""

import json
import math
from collections import namedtuple
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError
from .esde import GaussianBelief
from .log import get_logger
from .spectral import DTYPE, EigenBasis, Spectrum, SpectralDynamics, as_tensor, normalize_basis

logger = get_logger(__name__)

ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu}
CHECKPOINT_VERSION = 1
PAIR_FREQUENCY_FLOOR = 1e-3
NOISE_FLOOR = 1e-4
PRIOR_JITTER = 1e-4
MAX_BASIS_COND = 1e6

DynamicsHeads = namedtuple("DynamicsHeads", ["spectrum", "basis", "Q", "penalty"])


def softplus_inverse(value):
    return math.log(math.expm1(value))


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first, output last) and the hidden activation."""

    layer_sizes: tuple
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"an MLP needs >= 1 layer of positive widths, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def layers(self):
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_params(self):
        return sum(fan_out * fan_in + fan_out for fan_in, fan_out in self.layers)

    def to_json(self):
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}


def mlp_forward(spec, params, x):
    """Run the MLP described by ``spec`` with weights read from flat ``params``."""
    if params.shape[-1] != spec.n_params:
        raise ConfigError(f"MLP expects {spec.n_params} parameters, got {params.shape[-1]}")
    if x.shape[-1] != spec.n_in:
        raise ConfigError(f"MLP expects input width {spec.n_in}, got {x.shape[-1]}")
    activation = ACTIVATIONS[spec.activation]
    offset = 0
    h = x
    for layer, (fan_in, fan_out) in enumerate(spec.layers):
        weight = params[offset: offset + fan_out * fan_in].view(fan_out, fan_in)
        offset += fan_out * fan_in
        bias = params[offset: offset + fan_out]
        offset += fan_out
        h = F.linear(h, weight, bias)
        if layer < len(spec.layers) - 1:
            h = activation(h)
    return h


def init_mlp_params(spec, generator, out_scale=1.0, out_bias=None):
    """
    Uniform(+-1/sqrt(fan_in)) weights, zero biases. The output layer weights
    are multiplied by ``out_scale`` and its bias set to ``out_bias``.
    """
    chunks = []
    for layer, (fan_in, fan_out) in enumerate(spec.layers):
        bound = 1.0 / math.sqrt(fan_in)
        weight = (torch.rand(fan_out * fan_in, generator=generator, dtype=DTYPE) * 2 - 1) * bound
        bias = torch.zeros(fan_out, dtype=DTYPE)
        if layer == len(spec.layers) - 1:
            weight = weight * out_scale
            if out_bias is not None:
                bias = as_tensor(out_bias).reshape(-1).clone()
        chunks += [weight, bias]
    return torch.cat(chunks)


@dataclass(frozen=True)
class HeadConfig:
    """Dimensions, constraints and architecture of a hypernetwork model."""

    n: int = 2
    m: int = 1
    k: int = 1
    n_complex_pairs: int = 0
    stable: bool = True
    hypernet_disabled: bool = False
    interval_dt: float = 1.0
    context_dim: int = 1
    g1_hidden: tuple = (64, 64)
    g2_hidden: tuple = (32,)
    prior_hidden: tuple = (32,)
    activation: str = "tanh"
    detach_belief_summary: bool = True
    B_mask: tuple = field(default=None)

    def __post_init__(self):
        for name in ("g1_hidden", "g2_hidden", "prior_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.B_mask is not None:
            object.__setattr__(self, "B_mask", tuple(bool(v) for v in self.B_mask))

    def validate(self):
        if self.n < 1 or self.k < 1 or self.context_dim < 1:
            raise ConfigError("n, k and context_dim must be positive")
        if not 1 <= self.m <= self.n:
            raise ConfigError(f"m must lie in [1, n={self.n}], got {self.m}")
        if self.n_complex_pairs < 0 or 2 * self.n_complex_pairs > self.n:
            raise ConfigError(f"{self.n_complex_pairs} complex pairs do not fit n={self.n}")
        if not self.interval_dt > 0:
            raise ConfigError(f"interval_dt must be positive, got {self.interval_dt}")
        if self.B_mask is not None and len(self.B_mask) != self.n:
            raise ConfigError(f"B_mask needs {self.n} flags, got {len(self.B_mask)}")
        return self

    @property
    def n_real(self):
        return self.n - 2 * self.n_complex_pairs

    @property
    def n_tril(self):
        return self.n * (self.n + 1) // 2

    @property
    def g2_spec(self):
        out = self.n + self.n * self.n + self.n_tril
        return MlpSpec((self.n + self.n * self.n, *self.g2_hidden, out), self.activation)

    @property
    def g1_spec(self):
        return MlpSpec((self.context_dim, *self.g1_hidden, self.g2_spec.n_params), self.activation)

    @property
    def prior_spec(self):
        out = self.n + self.n_tril + self.n + self.m
        return MlpSpec((self.context_dim, *self.prior_hidden, out), self.activation)

    def to_json(self):
        payload = asdict(self)
        for name in ("g1_hidden", "g2_hidden", "prior_hidden"):
            payload[name] = list(payload[name])
        payload["B_mask"] = None if self.B_mask is None else list(self.B_mask)
        return payload

    @classmethod
    def from_json(cls, payload):
        try:
            return cls(**payload).validate()
        except TypeError as exc:
            raise DataError(f"bad head_config: {exc}") from exc


def lower_triangular(raw, n):
    """Lower-triangular factor from n(n+1)/2 raw values with a softplus diagonal."""
    rows, cols = torch.tril_indices(n, n)
    L = torch.zeros((n, n), dtype=raw.dtype).index_put((rows, cols), raw)
    return L - torch.diag(torch.diagonal(L)) + torch.diag(F.softplus(torch.diagonal(L)))


def _raw_for_unit_lower(n, diag_value):
    rows, cols = torch.tril_indices(n, n)
    fill = softplus_inverse(diag_value)
    return [fill if r == c else 0.0 for r, c in zip(rows.tolist(), cols.tolist())]


def _g2_output_bias(config):
    eigen_raw = -0.5 if not config.stable else softplus_inverse(0.5)
    freq_raw = softplus_inverse(1.0 - PAIR_FREQUENCY_FLOOR)
    rates = [eigen_raw] * config.n_real
    for _ in range(config.n_complex_pairs):
        rates += [eigen_raw, freq_raw]
    basis = torch.eye(config.n, dtype=DTYPE).reshape(-1).tolist()
    return rates + basis + _raw_for_unit_lower(config.n, math.sqrt(0.1))


def _prior_output_bias(config):
    return (
        [0.0] * config.n
        + _raw_for_unit_lower(config.n, 1.0)
        + [0.0] * config.n
        + [softplus_inverse(0.1)] * config.m
    )


class HyperModel(nn.Module):
    """
    Learnable state: g1 weights ``theta``, prior-network weights and the
    global control map ``B_global`` (rows flagged in ``B_mask`` stay zero).

    At initialization g1 ignores its input almost completely and emits a
    g2 whose output layer is dominated by a bias that decodes to eigenvalues
    near -0.5, frequencies near 1, V near I and a small diagonal Q.
    """

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config.validate()
        generator = torch.Generator().manual_seed(int(seed))
        g2_init = init_mlp_params(config.g2_spec, generator, out_scale=0.1, out_bias=_g2_output_bias(config))
        theta = init_mlp_params(config.g1_spec, generator, out_scale=0.01, out_bias=g2_init)
        prior_params = init_mlp_params(
            config.prior_spec, generator, out_scale=0.1, out_bias=_prior_output_bias(config)
        )
        B_global = torch.randn((config.n, config.k), generator=generator, dtype=DTYPE) * 0.1
        mask = config.B_mask if config.B_mask is not None else [False] * config.n
        self.theta = nn.Parameter(theta)
        self.prior_params = nn.Parameter(prior_params)
        self.B_global = nn.Parameter(B_global)
        self.register_buffer("B_mask", torch.tensor(mask, dtype=torch.bool))

    @property
    def interval_dt(self):
        return self.config.interval_dt

    def control_map(self):
        return self.B_global * (~self.B_mask).to(DTYPE).unsqueeze(1)

    def sequence_start(self, context):
        """Initial belief, alpha and R for one sequence."""
        return prior(self, context)

    def context_weights(self, context):
        return hyper_forward(self, context)

    def regime(self, context, belief, alpha, R, W=None):
        """Regime for the interval starting at ``belief``; returns (dynamics, penalty)."""
        if W is None:
            W = hyper_forward(self, context)
        summary = belief_summary(belief, detach=self.config.detach_belief_summary)
        heads = dynamics_heads(W, summary, self.config)
        dynamics = SpectralDynamics(
            spectrum=heads.spectrum,
            basis=heads.basis,
            Q=heads.Q,
            alpha=alpha,
            B=self.control_map(),
            R=R,
            B_mask=self.B_mask,
        )
        return dynamics, heads.penalty


def _context_input(config, context):
    C = as_tensor(context).reshape(-1)
    if C.shape[0] != config.context_dim:
        raise ConfigError(f"context has {C.shape[0]} entries, model expects {config.context_dim}")
    if config.hypernet_disabled:
        return torch.ones(config.context_dim, dtype=DTYPE)
    return C


def hyper_forward(model, context):
    """g1(C; theta): the flat weight vector W of g2."""
    return mlp_forward(model.config.g1_spec, model.theta, _context_input(model.config, context))


def belief_summary(belief, detach=True):
    """(mu, vec(Sigma)) as the g2 input; cut from the graph when ``detach``."""
    summary = torch.cat([belief.mu, belief.sigma.reshape(-1)])
    return summary.detach() if detach else summary


def basis_penalty(V):
    """max(0, log cond(V) - log 1e6)."""
    singular = torch.linalg.svdvals(V)
    return F.relu(torch.log(singular[0] / singular[-1]) - math.log(MAX_BASIS_COND))


def dynamics_heads(W, summary, config):
    """
    Map g2's raw outputs onto a valid regime.

    Returns:
    --------
    DynamicsHeads(spectrum, basis, Q, penalty)
    """
    n, n_real = config.n, config.n_real
    raw = mlp_forward(config.g2_spec, W, summary)
    rates = raw[:n]
    reals = rates[:n_real]
    pair_raw = rates[n_real:].reshape(-1, 2)
    decay = pair_raw[:, 0]
    if config.stable:
        reals = -F.softplus(reals)
        decay = -F.softplus(decay)
    pairs = torch.stack([decay, F.softplus(pair_raw[:, 1]) + PAIR_FREQUENCY_FLOOR], dim=1)
    spectrum = Spectrum(reals, pairs)
    V = normalize_basis(spectrum, raw[n: n + n * n].reshape(n, n))
    L = lower_triangular(raw[n + n * n:], n)
    return DynamicsHeads(spectrum, EigenBasis(V), L @ L.T, basis_penalty(V))


def _prior_outputs(model, context):
    config = model.config
    out = mlp_forward(config.prior_spec, model.prior_params, _context_input(config, context))
    n = config.n
    mu0 = out[:n]
    L0 = lower_triangular(out[n: n + config.n_tril], n)
    alpha = out[n + config.n_tril: 2 * n + config.n_tril]
    noise = out[2 * n + config.n_tril:]
    return mu0, L0, alpha, noise


def sequence_heads(model, context):
    """alpha (raw) and diagonal R (softplus + 1e-4); fixed for the whole sequence."""
    _, _, alpha, noise = _prior_outputs(model, context)
    return alpha, torch.diag(F.softplus(noise) + NOISE_FLOOR)


def prior(model, context):
    """Initial belief N(mu0, L0 L0^T + 1e-4 I) at t = 0, plus alpha and R."""
    mu0, L0, alpha, noise = _prior_outputs(model, context)
    sigma0 = L0 @ L0.T + PRIOR_JITTER * torch.eye(model.config.n, dtype=DTYPE)
    belief = GaussianBelief(mu0, sigma0, 0.0)
    return belief, alpha, torch.diag(F.softplus(noise) + NOISE_FLOOR)


def save_checkpoint(path, model, opt_state=None, epoch=None, extra=None):
    """Write the model (and optionally optimizer state) as versioned JSON."""
    config = model.config
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "head_config": config.to_json(),
        "g1_spec": config.g1_spec.to_json(),
        "g2_spec": config.g2_spec.to_json(),
        "prior_spec": config.prior_spec.to_json(),
        "theta": model.theta.detach().tolist(),
        "prior_params": model.prior_params.detach().tolist(),
        "B_global": model.B_global.detach().tolist(),
        "B_mask": model.B_mask.tolist(),
    }
    if opt_state is not None:
        payload["opt_state"] = opt_state.to_json()
    if epoch is not None:
        payload["epoch"] = int(epoch)
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    logger.debug("checkpoint written to %s", path)
    return path


def load_checkpoint(path):
    """
    Read a checkpoint back. Returns ``(model, payload)``; the raw payload
    still holds ``opt_state`` / ``epoch`` when they were saved.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not a JSON checkpoint: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {payload.get('format_version')}")
    config = HeadConfig.from_json(payload["head_config"])
    model = HyperModel(config)
    expected = {"theta": config.g1_spec.n_params, "prior_params": config.prior_spec.n_params}
    for name, size in expected.items():
        if len(payload[name]) != size:
            raise DataError(f"checkpoint {name} has {len(payload[name])} values, expected {size}")
    with torch.no_grad():
        model.theta.copy_(as_tensor(payload["theta"]))
        model.prior_params.copy_(as_tensor(payload["prior_params"]))
        model.B_global.copy_(as_tensor(payload["B_global"]))
        model.B_mask.copy_(torch.tensor(payload["B_mask"], dtype=torch.bool))
    return model, payload
