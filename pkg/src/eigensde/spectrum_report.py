"""
eigensde Spectrum Report
========================

Reads the eigenvalues a trained model assigns to each trajectory and
classifies them:

    real              every eigenvalue real
    complex-decaying  a conjugate pair a +/- ib with |a| >= 0.1
    near-imaginary    a conjugate pair with |a| < 0.1 (periodic regime)

For 2x2 dynamics the eigenvalues are the roots of the characteristic
quadratic x^2 - tr(A) x + det(A); the discriminant decides between a
real pair (>= 0) and a conjugate pair (< 0).
"""

import cmath

import numpy as np
import pandas as pd
import torch

from .errors import ConfigError
from .train import unroll

NEAR_IMAGINARY = 0.1


def solve_quadratic(a, b, c):
    Δ = b**2 - 4*a*c
    root1 = (-b + cmath.sqrt(Δ)) / (2*a)
    root2 = (-b - cmath.sqrt(Δ)) / (2*a)
    return Δ, root1, root2


def characteristic_roots(A):
    """Discriminant and eigenvalues of a 2x2 matrix, smaller real part first."""
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2):
        raise ConfigError(f"characteristic_roots needs a 2x2 matrix, got {A.shape}")
    Δ, r1, r2 = solve_quadratic(1.0, -np.trace(A), np.linalg.det(A))
    if Δ >= 0:
        r1, r2 = complex(r1.real, 0.0), complex(r2.real, 0.0)
    return Δ, sorted((r1, r2), key=lambda z: (z.real, z.imag))


def classify_spectrum(eigenvalues):
    pairs = [z for z in eigenvalues if z.imag > 0]
    if not pairs:
        return "real"
    if any(abs(z.real) < NEAR_IMAGINARY for z in pairs):
        return "near-imaginary"
    return "complex-decaying"


def format_spectrum(eigenvalues, digits=3):
    """'-0.75 ± 1.98i' for conjugate pairs, '(-1.309, -0.191)' for reals."""
    reals = sorted(round(z.real, digits) for z in eigenvalues if z.imag == 0)
    pairs = [z for z in eigenvalues if z.imag > 0]
    parts = [f"{round(z.real, digits)} ± {round(z.imag, digits)}i" for z in pairs]
    if reals:
        parts.insert(0, "(" + ", ".join(str(r) for r in reals) + ")")
    return "; ".join(parts)


def trajectory_eigenvalues(model, traj):
    """Eigenvalues averaged over every regime the model uses on ``traj``."""
    collected = []
    with torch.no_grad():
        unroll(model, traj, on_regime=lambda t, dyn: collected.append(dyn.spectrum.eigenvalues()))
    values = np.array(collected)
    return [complex(z) for z in values.mean(axis=0)]


def spectrum_report(model, dataset):
    """
    Per-trajectory table (``re_i``, ``im_i`` columns, class, text) and an
    across-trajectory summary (mean and std per column).
    """
    rows = []
    for traj in dataset:
        values = trajectory_eigenvalues(model, traj)
        row = {"traj_id": traj.traj_id}
        for i, z in enumerate(values, start=1):
            row[f"re_{i}"] = z.real
            row[f"im_{i}"] = z.imag
        row["class"] = classify_spectrum(values)
        row["spectrum"] = format_spectrum(values)
        rows.append(row)
    table = pd.DataFrame(rows)
    numeric = table.drop(columns=["traj_id", "class", "spectrum"])
    summary = pd.DataFrame({"mean": numeric.mean(), "std": numeric.std(ddof=1)})
    return table, summary


def ground_truth_lines(A):
    """Printable description of a 2x2 ground-truth matrix."""
    Δ, roots = characteristic_roots(A)
    return [
        f"Discriminant (Δ): {Δ:.6g}",
        f"Roots: {format_spectrum(roots)}",
        f"Class: {classify_spectrum(roots)}",
    ]
