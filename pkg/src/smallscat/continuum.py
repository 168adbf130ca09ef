"""Continuum limit: effective-field integral equation and effective medium.

As the particles become many and small, the per-particle capacitances turn
into a volume density ``Ct(x)`` (units L^-2) and the effective field solves

    U_e(x) = U0(x) - \\int_D G(x, y) Ct(y) U_e(y) dy.

This is the background volume equation with the potential ``q0 + Ct``.  Both
forms are implemented: ``route="kernel"`` composes the background Green's
function numerically, ``route="potential"`` re-solves with ``q0 + Ct``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .background import (RESIDUAL_TOL, ComplexField, PotentialGrid, _unit,
                         background_amplitude, plane_wave, scattering_solution_at)
from .discrete import ParticleConfiguration
from .errors import DomainError, ResonanceError, SolverError
from .shapes import RESONANCE_EPS, ShapeSummary


@dataclass(frozen=True, eq=False)
class CtildeField:
    """Volume density of effective capacitance on a grid."""

    grid: PotentialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, complex)
        if v.ndim == 0:
            v = np.full(self.grid.shape, complex(v))
        object.__setattr__(self, "values", v.reshape(self.grid.shape))

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    def integral(self) -> complex:
        return complex(self.values.sum() * self.grid.voxel_volume)


@dataclass(frozen=True, eq=False)
class EffectivePotential:
    q: np.ndarray
    n: np.ndarray


@dataclass(frozen=True, eq=False)
class DensityField:
    """Particle number density N(x) (units L^-3)."""

    grid: PotentialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim == 0:
            v = np.full(self.grid.shape, float(v))
        object.__setattr__(self, "values", v.reshape(self.grid.shape))


@dataclass(frozen=True, eq=False)
class ImpedanceField:
    """Boundary impedance h(x); NaN marks voxels without particles."""

    grid: PotentialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, complex)
        if v.ndim == 0:
            v = np.full(self.grid.shape, complex(v))
        object.__setattr__(self, "values", v.reshape(self.grid.shape))

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.values)


def ctilde_from_density(N: DensityField, h: ImpedanceField, shape: ShapeSummary,
                        eps: float = RESONANCE_EPS) -> CtildeField:
    """Ct(x) = N C / (1 + C / (h |S|)) for identical particles."""
    C, S = shape.capacitance_C, shape.area
    n = N.values
    occupied = n > 0
    hv = h.values
    if np.any(occupied & ~np.isfinite(hv)) or np.any(occupied & (hv == 0)):
        raise DomainError("impedance must be set and nonzero wherever N > 0")
    out = np.zeros(N.grid.shape, complex)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 + C / (hv[occupied] * S)
    bad = np.abs(denom) < eps
    if np.any(bad):
        idx = np.flatnonzero(occupied)[bad]
        raise ResonanceError(f"resonant impedance at {len(idx)} voxels", indices=idx.tolist())
    out[occupied] = n[occupied] * C / denom
    return CtildeField(N.grid, out)


def ctilde_from_particles(config: ParticleConfiguration, grid: PotentialGrid) -> CtildeField:
    """Empirical density: per-voxel sum of particle capacitances over voxel volume."""
    idx = grid.voxel_index(config.centers) if config.M else np.zeros(0, int)
    if np.any(idx < 0):
        raise DomainError("particles outside the grid")
    values = np.zeros(grid.size, complex)
    np.add.at(values, idx, config.ctilde)
    return CtildeField(grid, values / grid.voxel_volume)


def effective_potential(grid: PotentialGrid, ctilde: CtildeField) -> EffectivePotential:
    if ctilde.values.shape != grid.shape:
        raise DomainError("grid and Ct field shapes differ")
    q = grid.q0 + ctilde.values
    return EffectivePotential(q, 1.0 - q / grid.k**2)


def _kernel_route(grid: PotentialGrid, ct: np.ndarray, alpha) -> np.ndarray:
    eng = grid.engine
    support = np.flatnonzero(ct)
    c_pts = grid.centers[support]
    u0_all = scattering_solution_at(grid, grid.centers, alpha)
    if support.size == 0:
        return u0_all
    # G(x, y) * vol between every voxel x and the Ct support, self-voxels ball-averaged
    G_all = eng.kernel(grid.centers, support)  # free part, (n_all, n_c)
    if eng.n_active:
        cols = eng.solve(eng.kernel(c_pts).T)  # G(t, y) * vol on q0 support
        G_all = G_all - eng.kernel(grid.centers) @ (eng.q_active[:, None] * cols)
    G_cc = G_all[support]
    A = np.eye(support.size, dtype=complex) + G_cc * ct[support][None, :]
    rhs = u0_all[support]
    ue_c = scipy.linalg.solve(A, rhs, check_finite=False)
    res = np.linalg.norm(A @ ue_c - rhs) / np.linalg.norm(rhs)
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise SolverError(f"effective-field residual {res:.3e}", residual=res)
    return u0_all - G_all @ (ct[support] * ue_c)


def solve_effective_field(grid: PotentialGrid, ctilde: CtildeField, alpha,
                          route: str = "kernel") -> ComplexField:
    """Effective field U_e(., alpha) on every voxel of ``grid``."""
    alpha = _unit(alpha)
    ct = ctilde.values.ravel()
    if ctilde.values.shape != grid.shape:
        raise DomainError("grid and Ct field shapes differ")
    if route == "kernel":
        values = _kernel_route(grid, ct, alpha)
    elif route == "potential":
        combined = grid.with_potential(grid.q0 + ctilde.values)
        values = scattering_solution_at(combined, grid.centers, alpha)
    else:
        raise ValueError(f"unknown route {route!r}")
    return ComplexField(grid, values)


def effective_field_at(grid: PotentialGrid, ctilde: CtildeField, U_e: ComplexField, points,
                       alpha) -> np.ndarray:
    """Evaluate U_e off the grid from its voxel values."""
    combined = grid.with_potential(grid.q0 + ctilde.values)
    eng = combined.engine
    p = np.atleast_2d(np.asarray(points, float))
    inc = plane_wave(p, _unit(alpha), grid.k)
    if eng.n_active == 0:
        return inc
    return inc - eng.kernel(p) @ (eng.q_active * U_e.flat[eng.active])


def continuum_amplitude(grid: PotentialGrid, ctilde: CtildeField, U_e: ComplexField, beta,
                        alpha) -> complex:
    """A0(beta, alpha) - (1/4pi) sum U0(y, -beta) Ct(y) U_e(y) vol."""
    beta, alpha = _unit(beta), _unit(alpha)
    A0 = background_amplitude(grid, beta, alpha)
    ct = ctilde.values.ravel()
    support = np.flatnonzero(ct)
    if support.size == 0:
        return A0
    u0_back = scattering_solution_at(grid, grid.centers[support], -beta)
    integral = np.sum(u0_back * ct[support] * U_e.flat[support]) * grid.voxel_volume
    return complex(A0 - integral / (4 * np.pi))
