"""Particle placement from a number-density field.

Two modes: ``lattice`` puts ``floor(N vol)`` particles on a regular sub-lattice
of each voxel; ``poisson-disk`` dart-throws inside each voxel with a
rejection radius ``min_distance``.  Both are deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .continuum import DensityField, ImpedanceField
from .discrete import ParticleConfiguration
from .errors import PlacementError
from .shapes import RESONANCE_EPS

# densest sphere packing fraction
PACKING_FRACTION = np.pi / (3 * np.sqrt(2))


@dataclass(frozen=True, eq=False)
class PlacementSpec:
    mode: str
    density: DensityField | None = None
    centers: np.ndarray | None = None
    min_distance: float = 0.0
    seed: int = 0
    max_attempts: int = 2000

    def __post_init__(self):
        if self.mode not in ("explicit", "lattice", "poisson-disk"):
            raise PlacementError(f"unknown placement mode {self.mode!r}")
        if self.mode == "explicit" and self.centers is None:
            raise PlacementError("explicit mode needs centers")
        if self.mode != "explicit" and self.density is None:
            raise PlacementError(f"{self.mode} mode needs a density field")


@dataclass(frozen=True, eq=False)
class PlacementReport:
    requested: np.ndarray
    realized: np.ndarray

    def to_json(self) -> dict:
        return {"requested_total": float(self.requested.sum()),
                "realized_total": int(self.realized.sum()),
                "max_voxel_deficit": float(np.max(self.requested - self.realized, initial=0.0))}


def _packing_check(counts, vol, d):
    if d <= 0:
        return
    cap = PACKING_FRACTION * vol / (4 / 3 * np.pi * (d / 2) ** 3)
    over = np.flatnonzero(counts > cap)
    if over.size:
        raise PlacementError(
            f"density infeasible for min_distance {d}: {over.size} voxels exceed the packing bound {cap:.3g}")


def _lattice(density: DensityField, d: float):
    grid = density.grid
    vol = grid.voxel_volume
    counts = np.floor(density.values.ravel() * vol + 1e-9).astype(int)
    _packing_check(counts, vol, d)
    pts = []
    for idx in np.flatnonzero(counts):
        n = counts[idx]
        m = int(np.ceil(round(n ** (1 / 3), 9)))
        if grid.spacing / m < d:
            raise PlacementError(f"sub-lattice spacing {grid.spacing / m:.3g} < min_distance {d}")
        sub = (np.arange(m) + 0.5) * grid.spacing / m
        local = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), -1).reshape(-1, 3)[:n]
        pts.append(grid.centers[idx] - 0.5 * grid.spacing + local)
    centers = np.vstack(pts) if pts else np.zeros((0, 3))
    return centers, counts


def _poisson_disk(density: DensityField, d: float, rng, max_attempts: int):
    grid = density.grid
    vol = grid.voxel_volume
    expected = density.values.ravel() * vol
    counts = np.floor(expected).astype(int)
    frac = expected - counts
    counts += (rng.random(len(frac)) < frac).astype(int)
    _packing_check(counts, vol, d)
    accepted: list[np.ndarray] = []
    buckets: dict[tuple, list[int]] = {}
    cell = d if d > 0 else grid.spacing

    def too_close(p):
        key = tuple(np.floor(p / cell).astype(int))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in buckets.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        if np.linalg.norm(accepted[j] - p) < d:
                            return True
        return False

    realized = np.zeros(len(counts), int)
    for idx in np.flatnonzero(counts):
        lo = grid.centers[idx] - 0.5 * grid.spacing
        for _ in range(counts[idx]):
            for _attempt in range(max_attempts):
                p = lo + rng.random(3) * grid.spacing
                if d <= 0 or not too_close(p):
                    break
            else:
                raise PlacementError(f"could not place particle in voxel {idx} after {max_attempts} attempts")
            buckets.setdefault(tuple(np.floor(p / cell).astype(int)), []).append(len(accepted))
            accepted.append(p)
            realized[idx] += 1
    centers = np.vstack(accepted) if accepted else np.zeros((0, 3))
    return centers, realized, expected


def place_particles(spec: PlacementSpec, shape, k: float, h, background=None,
                    resonance_eps: float = RESONANCE_EPS):
    """Build a :class:`ParticleConfiguration` from a placement spec.

    ``h`` is a scalar impedance or an :class:`ImpedanceField` looked up at
    each particle's voxel.  Returns ``(configuration, report)``.
    """
    if spec.mode == "explicit":
        centers = np.asarray(spec.centers, float).reshape(-1, 3)
        counts = np.ones(len(centers))
        report = PlacementReport(counts, counts.astype(int))
    elif spec.mode == "lattice":
        centers, counts = _lattice(spec.density, spec.min_distance)
        report = PlacementReport(spec.density.values.ravel() * spec.density.grid.voxel_volume, counts)
    else:
        rng = np.random.default_rng(spec.seed)
        centers, realized, expected = _poisson_disk(spec.density, spec.min_distance, rng,
                                                    spec.max_attempts)
        report = PlacementReport(expected, realized)
    if isinstance(h, ImpedanceField):
        idx = h.grid.voxel_index(centers)
        if np.any(idx < 0):
            raise PlacementError("particle outside the impedance field grid")
        hv = h.values.ravel()[idx]
        if not np.all(np.isfinite(hv)):
            raise PlacementError("particle placed where the impedance field is unset")
    else:
        hv = np.full(len(centers), complex(h))
    return ParticleConfiguration(centers, hv, shape, k, background, resonance_eps=resonance_eps), report
