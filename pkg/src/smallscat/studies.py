"""Batch studies: single-sphere oracle comparison and the discrete-to-continuum ladder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .background import PotentialGrid
from .continuum import CtildeField, solve_effective_field
from .discrete import (ParticleConfiguration, compute_regime, discrete_amplitude,
                       effective_field_at_particles, solve)
from .oracle import RobinSphereSpec, robin_sphere_amplitude
from .shapes import ShapeSummary

ORACLE_KA = (0.01, 0.03, 0.05)
ORACLE_HA = (0.1, 1.0, 10.0)


def oracle_compare(ka_values=ORACLE_KA, ha_values=ORACLE_HA, k: float = 1.0,
                   alpha=(0.0, 0.0, 1.0), betas=None) -> list[dict]:
    """One row per (ka, ha, beta): small-particle amplitude vs the exact sphere series."""
    alpha = np.asarray(alpha, float)
    if betas is None:
        betas = [alpha, 0.0 - alpha, np.array([1.0, 0.0, 0.0])]
    rows = []
    for ka in ka_values:
        for ha in ha_values:
            a = ka / k
            h = ha / a
            cfg = ParticleConfiguration(np.zeros((1, 3)), h, ShapeSummary.sphere(a), k)
            Q = solve(cfg, alpha)
            spec = RobinSphereSpec(a, h, k)
            for beta in betas:
                beta = np.asarray(beta, float)
                A_d = discrete_amplitude(cfg, Q, beta)
                A_o = robin_sphere_amplitude(spec, beta, alpha)
                rows.append({"ka": ka, "ha": ha, "beta": beta, "A_discrete": A_d, "A_oracle": A_o,
                             "rel_err": abs(A_d - A_o) / abs(A_o)})
    return rows


def cell_average(values, points, lower, upper, n_cells: int) -> np.ndarray:
    """Mean of point samples over an ``n_cells``^3 partition of a box."""
    lower = np.asarray(lower, float)
    width = (np.asarray(upper, float) - lower) / n_cells
    idx = np.clip(np.floor((points - lower) / width).astype(int), 0, n_cells - 1)
    flat = np.ravel_multi_index(idx.T, (n_cells,) * 3)
    total = np.zeros(n_cells**3, complex)
    count = np.zeros(n_cells**3)
    np.add.at(total, flat, values)
    np.add.at(count, flat, 1)
    with np.errstate(invalid="ignore"):
        return total / count


@dataclass(frozen=True)
class LadderRung:
    n: int
    M: int
    a: float
    d: float
    ka: float
    a_over_d: float
    error_scale: float
    gap: float

    def to_row(self) -> list:
        return [self.n, self.M, self.a, self.d, self.ka, self.a_over_d, self.error_scale, self.gap]


LADDER_HEADER = ["n", "M", "a", "d", "ka", "a_over_d", "error_scale", "gap"]


def lattice_configuration(n: int, ctilde: complex, ha: float, k: float, side: float = 1.0,
                          lower=(0.0, 0.0, 0.0)) -> ParticleConfiguration:
    """n^3 identical spheres on a cubic lattice realizing the density ``ctilde``.

    Each particle carries ``ctilde * d^3``; with ``h a`` held fixed the radius
    follows from C~ = 4 pi a (h a) / (1 + h a).
    """
    d = side / n
    x = (np.arange(n) + 0.5) * d
    centers = np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3) + np.asarray(lower)
    ct_m = ctilde * d**3
    a = float(np.real(ct_m) * (1 + ha) / (4 * np.pi * ha))
    return ParticleConfiguration(centers, ha / a, ShapeSummary.sphere(a), k)


def convergence_study(levels=(5, 10, 15), ctilde: float = 10.0, ha: float = 0.1, k: float = 3.0,
                      continuum_cells: int = 20, coarse_cells: int = 5,
                      alpha=(0.0, 0.0, 1.0)) -> list[LadderRung]:
    """Coarse-grained gap between discrete and continuum effective fields on the unit cube.

    The continuum field is averaged over ``coarse_cells``^3 cells; the discrete
    effective field at the particles is averaged over the same cells.
    """
    alpha = np.asarray(alpha, float)
    lower, upper = np.zeros(3), np.ones(3)
    grid = PotentialGrid.box(lower, upper, 1.0 / continuum_cells, k)
    U_e = solve_effective_field(grid, CtildeField(grid, ctilde), alpha, route="potential")
    ref = cell_average(U_e.flat, grid.centers, lower, upper, coarse_cells)
    rungs = []
    for n in levels:
        cfg = lattice_configuration(n, ctilde, ha, k)
        Q = solve(cfg, alpha)
        ue = effective_field_at_particles(cfg, Q)
        coarse = cell_average(ue, cfg.centers, lower, upper, coarse_cells)
        gap = float(np.linalg.norm(coarse - ref) / np.linalg.norm(ref))
        reg = compute_regime(cfg)
        rungs.append(LadderRung(n, cfg.M, reg.a, reg.d, reg.ka, reg.a_over_d, reg.error_scale, gap))
    return rungs
