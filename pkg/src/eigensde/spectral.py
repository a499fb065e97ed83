"""
eigensde Spectral Dynamics
==========================

Linear dynamics stored as eigenvalues plus eigenbasis instead of the
dynamics matrix itself. Complex-conjugate eigenvalue pairs are kept in
their realified form: each pair contributes a column couple
``(v_real, v_im)`` to the basis and a rotation block

    D_pair = [[a, b], [-b, a]]

to the block-diagonal generator ``D``, so that ``A = V D V^-1`` and the
eigenfunction ``Phi(t) = V exp(D t)`` are evaluated without ever touching
complex arithmetic.

All tensors are float64 torch tensors so that every quantity produced by
the hypernetwork stays differentiable.
"""

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    ConfigError,
    DataError,
    DefectiveMatrixError,
    NonPSDCovarianceError,
    SingularBasisError,
)

DTYPE = torch.float64
EXP_CLAMP = 700.0
DET_FLOOR = 1e-8
PSD_TOL = 1e-10
DEFECTIVE_COND = 1e10
FORMAT_VERSION = 1


class ExponentSaturationWarning(RuntimeWarning):
    """An exponent argument was clamped to +/-700 before exponentiation."""


def as_tensor(value):
    """Convert lists/arrays to float64 tensors; tensors keep their graph."""
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=float), dtype=DTYPE)


def clamped_exp(x):
    """exp(x) with the argument clamped to +/-700; warns on saturation."""
    if bool((x.detach().abs() > EXP_CLAMP).any()):
        warnings.warn(
            f"exponent argument beyond +/-{EXP_CLAMP:g} was clamped",
            ExponentSaturationWarning,
            stacklevel=3,
        )
    return torch.exp(x.clamp(-EXP_CLAMP, EXP_CLAMP))


@functools.lru_cache(maxsize=64)
def rotation_generator(n_real, n_complex):
    """Block-diagonal J: zero on real coordinates, [[0, 1], [-1, 0]] per pair."""
    n = n_real + 2 * n_complex
    J = torch.zeros((n, n), dtype=DTYPE)
    for p in range(n_complex):
        i = n_real + 2 * p
        J[i, i + 1] = 1.0
        J[i + 1, i] = -1.0
    return J


@dataclass(frozen=True)
class Spectrum:
    """
    Eigenvalues of one linear regime.

    Attributes:
    -----------
    real_eigs : tensor (n_r,)
        Real eigenvalues.
    complex_pairs : tensor (n_c, 2)
        One row ``(a, b)`` per conjugate pair ``a +/- ib`` with ``b > 0``.
    """

    real_eigs: torch.Tensor
    complex_pairs: torch.Tensor

    def __post_init__(self):
        real = as_tensor(self.real_eigs).reshape(-1)
        pairs = as_tensor(self.complex_pairs).reshape(-1, 2)
        if pairs.shape[0] and not bool((pairs[:, 1].detach() > 0).all()):
            raise ConfigError("complex pairs need a strictly positive imaginary part")
        object.__setattr__(self, "real_eigs", real)
        object.__setattr__(self, "complex_pairs", pairs)

    @property
    def n_real(self):
        return int(self.real_eigs.shape[0])

    @property
    def n_complex(self):
        return int(self.complex_pairs.shape[0])

    @property
    def n(self):
        return self.n_real + 2 * self.n_complex

    def coordinate_rates(self):
        """Per-coordinate decay rate ``a`` and angular frequency ``b``."""
        a = torch.cat([self.real_eigs, self.complex_pairs[:, 0].repeat_interleave(2)])
        b = torch.cat([
            torch.zeros(self.n_real, dtype=DTYPE),
            self.complex_pairs[:, 1].repeat_interleave(2),
        ])
        return a, b

    def is_stable(self):
        rates, _ = self.coordinate_rates()
        return bool((rates.detach() < 0).all())

    def eigenvalues(self):
        """Eigenvalues as Python complex numbers (pairs listed as a + ib)."""
        values = [complex(x, 0.0) for x in self.real_eigs.detach().tolist()]
        values += [complex(a, b) for a, b in self.complex_pairs.detach().tolist()]
        return values

    def generator(self):
        """The realified block-diagonal generator D."""
        a, b = self.coordinate_rates()
        J = rotation_generator(self.n_real, self.n_complex)
        return torch.diag(a) + b.unsqueeze(1) * J


@dataclass(frozen=True)
class EigenBasis:
    """Eigenbasis V: real columns first, then (v_real, v_im) per pair."""

    V: torch.Tensor
    det_floor: float = DET_FLOOR

    def __post_init__(self):
        V = as_tensor(self.V)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ConfigError(f"eigenbasis must be square, got shape {tuple(V.shape)}")
        object.__setattr__(self, "V", V)

    @property
    def n(self):
        return int(self.V.shape[0])

    def check(self):
        det = float(torch.linalg.det(self.V.detach()))
        if not math.isfinite(det) or abs(det) < self.det_floor:
            raise SingularBasisError(
                f"|det V| = {abs(det):.3e} is below the floor {self.det_floor:.1e}"
            )

    def inverse(self):
        self.check()
        return torch.linalg.inv(self.V)


@dataclass(frozen=True)
class SpectralDynamics:
    """
    One linear regime ``dX = [A (X - alpha) + B u] dt + dW``, ``Cov(dW) = Q dt``,
    observed as the first m coordinates with noise covariance R.

    ``B_mask[i] = True`` masks row i of B (that coordinate receives no
    direct control); masked rows are zeroed on construction.
    """

    spectrum: Spectrum
    basis: EigenBasis
    Q: torch.Tensor
    alpha: torch.Tensor
    B: torch.Tensor
    R: torch.Tensor
    B_mask: torch.Tensor = field(default=None)

    def __post_init__(self):
        n = self.spectrum.n
        if self.basis.n != n:
            raise ConfigError(f"basis is {self.basis.n}-dim but the spectrum is {n}-dim")
        Q = as_tensor(self.Q)
        alpha = as_tensor(self.alpha).reshape(-1)
        B = as_tensor(self.B)
        if B.ndim == 1:
            B = B.unsqueeze(1)
        R = as_tensor(self.R)
        if R.ndim == 1:
            R = torch.diag(R)
        if Q.shape != (n, n):
            raise ConfigError(f"Q must be {n}x{n}, got {tuple(Q.shape)}")
        if alpha.shape != (n,):
            raise ConfigError(f"alpha must have {n} entries, got {tuple(alpha.shape)}")
        if B.shape[0] != n:
            raise ConfigError(f"B must have {n} rows, got {tuple(B.shape)}")
        if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] > n:
            raise ConfigError(f"R must be m x m with m <= {n}, got {tuple(R.shape)}")
        if self.B_mask is None:
            mask = torch.zeros(n, dtype=torch.bool)
        else:
            mask = torch.as_tensor(self.B_mask, dtype=torch.bool).reshape(-1)
        if mask.shape != (n,):
            raise ConfigError(f"B_mask must have {n} entries")
        B = B * (~mask).to(DTYPE).unsqueeze(1)
        for name, value in (("Q", Q), ("alpha", alpha), ("B", B), ("R", R), ("B_mask", mask)):
            object.__setattr__(self, name, value)

    @property
    def n(self):
        return self.spectrum.n

    @property
    def m(self):
        return int(self.R.shape[0])

    @property
    def k(self):
        return int(self.B.shape[1])

    @property
    def A(self):
        return dynamics_matrix(self.spectrum, self.basis)

    def validate(self):
        """Full invariant check: invertible basis, PSD Q and R."""
        self.basis.check()
        check_psd(self.Q, "Q")
        check_psd(self.R, "R")
        return self

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "n": self.n,
            "real_eigs": self.spectrum.real_eigs.detach().tolist(),
            "complex_pairs": self.spectrum.complex_pairs.detach().tolist(),
            "V": self.basis.V.detach().tolist(),
            "Q": self.Q.detach().tolist(),
            "alpha": self.alpha.detach().tolist(),
            "B": self.B.detach().tolist(),
            "B_mask": self.B_mask.tolist(),
            "R": self.R.detach().tolist(),
        }

    @classmethod
    def from_json(cls, payload):
        version = payload.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported dynamics format_version {version}")
        try:
            dynamics = cls(
                spectrum=Spectrum(payload["real_eigs"], payload["complex_pairs"]),
                basis=EigenBasis(payload["V"]),
                Q=payload["Q"],
                alpha=payload["alpha"],
                B=payload["B"],
                R=payload["R"],
                B_mask=payload.get("B_mask"),
            )
        except KeyError as exc:
            raise DataError(f"dynamics record is missing {exc}") from exc
        if dynamics.n != payload.get("n", dynamics.n):
            raise DataError("dynamics record 'n' disagrees with its spectrum")
        return dynamics.validate()


def check_psd(matrix, name="matrix", tol=PSD_TOL):
    """Raise if a symmetric matrix has an eigenvalue below -tol (scaled)."""
    M = matrix.detach()
    if M.numel() == 0:
        return
    if not bool(torch.allclose(M, M.T, atol=1e-10, rtol=0.0)):
        raise NonPSDCovarianceError(f"{name} is not symmetric")
    lowest = float(torch.linalg.eigvalsh(M).min())
    scale = max(1.0, float(M.abs().max()))
    if lowest < -tol * scale:
        raise NonPSDCovarianceError(f"{name} has eigenvalue {lowest:.3e} < 0")


def exp_generator(spectrum, t):
    """exp(D t) for the realified generator D (scale, cos and sin per block)."""
    a, b = spectrum.coordinate_rates()
    t = as_tensor(t)
    scale = clamped_exp(a * t)
    J = rotation_generator(spectrum.n_real, spectrum.n_complex)
    return torch.diag(scale * torch.cos(b * t)) + (scale * torch.sin(b * t)).unsqueeze(1) * J


def eigenfunction_at(spectrum, basis, t):
    """
    Evaluate the eigenfunction Phi(t) = V exp(D t).

    Real columns are scaled by exp(lambda t); each pair block is
    ``exp(a t) [[cos bt, sin bt], [-sin bt, cos bt]]`` applied to
    ``(v_real, v_im)``. Phi(0) is V exactly.
    """
    return basis.V @ exp_generator(spectrum, t)


def eigenfunction_inverse_at(spectrum, basis, t):
    """Phi(t)^-1 = exp(-D t) V^-1, never a numeric inverse of Phi(t)."""
    return exp_generator(spectrum, -as_tensor(t)) @ basis.inverse()


def dynamics_matrix(spectrum, basis):
    """A = V D V^-1 (real)."""
    return basis.V @ spectrum.generator() @ basis.inverse()


def _leading_index(magnitudes):
    threshold = 1e-9 * float(magnitudes.detach().max())
    return int(torch.nonzero(magnitudes.detach() > threshold)[0, 0])


def normalize_basis(spectrum, V, fix_phase=False):
    """
    Remove the scale (and optionally sign/phase) freedom of eigenvectors.

    Real columns get unit 2-norm; each ``(v_real, v_im)`` couple gets
    ``|v_real|^2 + |v_im|^2 = 2``. With ``fix_phase`` real columns are
    sign-flipped so their first nonzero entry is positive and each complex
    eigenvector is rotated so its first nonzero entry is real positive.
    None of these changes alter A.
    """
    V = as_tensor(V)
    n_real = spectrum.n_real
    columns = []
    for i in range(n_real):
        v = V[:, i] / torch.linalg.vector_norm(V[:, i])
        if fix_phase:
            lead = _leading_index(v.abs())
            v = v * torch.sign(v[lead].detach())
        columns.append(v)
    for p in range(spectrum.n_complex):
        vr, vi = V[:, n_real + 2 * p], V[:, n_real + 2 * p + 1]
        scale = math.sqrt(2.0) / torch.sqrt((vr * vr).sum() + (vi * vi).sum())
        vr, vi = vr * scale, vi * scale
        if fix_phase:
            modulus = torch.sqrt(vr * vr + vi * vi)
            lead = _leading_index(modulus)
            c, s = vr[lead] / modulus[lead], vi[lead] / modulus[lead]
            vr, vi = vr * c + vi * s, vi * c - vr * s
        columns += [vr, vi]
    return torch.stack(columns, dim=1)


def decompose(A):
    """
    Spectrum and normalized eigenbasis of a diagonalizable real matrix.

    Real eigenvalues come first in ascending order, then conjugate pairs
    (stored with b > 0) by ascending real part, ties by b.

    Raises
    ------
    DefectiveMatrixError
        When the eigenvector matrix is numerically singular (condition
        above 1e10) or eigenvalues fail to pair up.
    """
    A = np.asarray(A.detach().numpy() if isinstance(A, torch.Tensor) else A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError(f"dynamics matrix must be square, got shape {A.shape}")
    eigenvalues, vectors = np.linalg.eig(A)
    if not np.isfinite(vectors).all() or np.linalg.cond(vectors) > DEFECTIVE_COND:
        raise DefectiveMatrixError("matrix is defective (eigenvectors nearly dependent)")

    tol = 1e-9 * max(1.0, float(np.abs(eigenvalues).max()))
    real_idx = [i for i, w in enumerate(eigenvalues) if abs(w.imag) <= tol]
    upper_idx = [i for i, w in enumerate(eigenvalues) if w.imag > tol]
    if len(real_idx) + 2 * len(upper_idx) != A.shape[0]:
        raise DefectiveMatrixError("eigenvalues do not form conjugate pairs")
    real_idx.sort(key=lambda i: eigenvalues[i].real)
    upper_idx.sort(key=lambda i: (eigenvalues[i].real, eigenvalues[i].imag))

    columns = [vectors[:, i].real for i in real_idx]
    for i in upper_idx:
        columns += [vectors[:, i].real, vectors[:, i].imag]
    spectrum = Spectrum(
        [eigenvalues[i].real for i in real_idx],
        [[eigenvalues[i].real, eigenvalues[i].imag] for i in upper_idx],
    )
    V = normalize_basis(spectrum, np.column_stack(columns), fix_phase=True)
    return spectrum, EigenBasis(V)


def random_spectral_dynamics(rng, n, n_complex=0, m=1, k=1, stable=True, max_cond=30.0):
    """Draw a well-conditioned random regime (tests and oracle checks)."""
    n_real = n - 2 * n_complex
    if n_real < 0 or m > n:
        raise ConfigError(f"cannot fit {n_complex} pairs and m={m} into n={n}")
    low, high = (-2.0, -0.2) if stable else (-1.0, 1.0)
    reals = rng.uniform(low, high, n_real)
    pairs = np.column_stack([
        rng.uniform(-1.5, -0.2, n_complex) if stable else rng.uniform(-1.0, 1.0, n_complex),
        rng.uniform(0.3, 3.0, n_complex),
    ])
    spectrum = Spectrum(reals, pairs)
    while True:
        V = rng.normal(size=(n, n))
        if np.linalg.cond(V) < max_cond:
            break
    L = rng.normal(size=(n, n)) * 0.5
    return SpectralDynamics(
        spectrum=spectrum,
        basis=EigenBasis(normalize_basis(spectrum, V)),
        Q=L @ L.T / n + 0.05 * np.eye(n),
        alpha=rng.normal(size=n),
        B=rng.normal(size=(n, k)),
        R=np.diag(rng.uniform(0.05, 0.5, m)),
    )
