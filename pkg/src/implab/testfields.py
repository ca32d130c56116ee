"""Reusable analytic and random fields for experiments and tests."""

from __future__ import annotations

import numpy as np

from .geometry import ComplexField, GridSpec, ScalarField


def bump(grid: GridSpec, center, radius: float, amplitude: float = 1.0) -> ScalarField:
    """Compactly supported smooth bump, amplitude at the center, zero
    outside the ball of the given radius."""
    x, y, z = grid.coords()
    r2 = ((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2) / radius ** 2
    vals = np.zeros(grid.shape)
    inside = r2 < 1.0
    vals[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return ScalarField(grid, vals)


def sum_of_bumps(grid: GridSpec, bumps) -> ScalarField:
    """bumps: iterable of (center, radius, amplitude) triples."""
    vals = np.zeros(grid.shape)
    for center, radius, amplitude in bumps:
        vals += bump(grid, center, radius, amplitude).values
    return ScalarField(grid, vals)


def random_band_limited(grid: GridSpec, max_mode: int = 3,
                        amplitude: float = 1.0, seed: int = 0) -> ScalarField:
    """Random smooth field vanishing on the cube faces.

    A sum of separable half-period sine modes up to max_mode per axis,
    with seeded Gaussian coefficients decaying like 1/|m|^2, rescaled to
    the requested sup amplitude.
    """
    rng = np.random.default_rng(seed)
    n = grid.n
    t = np.linspace(0.0, np.pi, n)
    modes = np.arange(1, max_mode + 1)
    # basis[m, i] = sin(m * t_i)
    basis = np.sin(np.outer(modes, t))
    coeff = rng.standard_normal((max_mode, max_mode, max_mode))
    mx, my, mz = np.meshgrid(modes, modes, modes, indexing="ij")
    coeff /= (mx ** 2 + my ** 2 + mz ** 2).astype(float)
    vals = np.einsum("abc,ax,by,cz->xyz", coeff, basis, basis, basis)
    peak = np.max(np.abs(vals))
    if peak > 0:
        vals *= amplitude / peak
    return ScalarField(grid, vals)


def plane_wave(grid: GridSpec, k: float, direction) -> ComplexField:
    """exp(i k d . x) with |d| normalized to one."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    x, y, z = grid.coords()
    phase = k * (d[0] * x + d[1] * y + d[2] * z)
    return ComplexField(grid, np.exp(1j * phase))
