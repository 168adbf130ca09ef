"""Background medium: scattering solution, Green's function and amplitude.

The medium is described by a voxelized potential ``q0 = k^2 (1 - n0)`` on an
axis-aligned box.  Both the scattering solution and the Green's function are
obtained from the volume equation

    u(x) = u_inc(x) - \\int g(x, t) q0(t) u(t) dt,   g = e^{ik|x-t|} / (4 pi |x-t|),

discretized by voxel-centroid collocation.  The singular self-voxel term is
replaced by the integral of ``g`` over the ball of equal volume.  Only voxels
with a nonzero potential ("active" voxels) carry unknowns; everything else is
evaluated from the solved density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import DomainError, SolverError

log = logging.getLogger(__name__)

DENSE_LIMIT = 20**3
RESIDUAL_TOL = 1e-10


def free_green(x, y, k):
    """Outgoing free-space kernel e^{ik|x-y|} / (4 pi |x-y|), broadcasting."""
    r = np.linalg.norm(np.asarray(x, float) - np.asarray(y, float), axis=-1)
    return np.exp(1j * k * r) / (4 * np.pi * r)


def plane_wave(points, direction, k):
    return np.exp(1j * k * (np.asarray(points, float) @ np.asarray(direction, float)))


def ball_integral(k: float, volume: float) -> complex:
    """Integral of the free kernel over a ball of the given volume about its centre."""
    R = (3.0 * volume / (4.0 * np.pi)) ** (1.0 / 3.0)
    kR = k * R
    if kR < 1e-4:
        return complex(R**2 / 2 * (1 + 2j * kR / 3))
    return complex(((1 - 1j * kR) * np.exp(1j * kR) - 1) / k**2)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not np.isclose(n, 1.0, atol=1e-12):
        raise DomainError(f"direction must be a unit vector, got |v| = {n}")
    return v / n


@dataclass(frozen=True, eq=False)
class PotentialGrid:
    """Voxelized potential q0 on the box ``[lower, lower + shape * spacing]``.

    The box is the domain D; ``q0`` vanishes outside it by construction.
    Values are stored in row-major ``(nx, ny, nz)`` order.
    """

    lower: np.ndarray
    spacing: float
    q0: np.ndarray
    k: float
    max_kh: float = 0.5

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(3)
        q0 = np.asarray(self.q0, dtype=complex)
        if q0.ndim != 3 or min(q0.shape) < 1:
            raise DomainError("q0 must be a non-empty 3-d array")
        if not (self.spacing > 0 and self.k > 0):
            raise DomainError("spacing and k must be positive")
        if not np.all(np.isfinite(q0)):
            raise DomainError("q0 must be finite (bounded)")
        if self.k * self.spacing > self.max_kh:
            raise DomainError(
                f"grid does not resolve the wavelength: k*spacing = {self.k * self.spacing:.3g}"
                f" > {self.max_kh}"
            )
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "k", float(self.k))

    @classmethod
    def box(cls, lower, upper, spacing, k, q0=0.0, **kw) -> "PotentialGrid":
        """Grid over ``[lower, upper]`` with a constant or callable potential."""
        lower = np.asarray(lower, float)
        upper = np.asarray(upper, float)
        shape = tuple(int(round(n)) for n in (upper - lower) / spacing)
        if not np.allclose(lower + np.array(shape) * spacing, upper, rtol=0, atol=1e-9 * spacing):
            raise DomainError("box extent is not a whole number of voxels")
        grid = cls(lower, spacing, np.zeros(shape, complex), k, **kw)
        if callable(q0):
            values = q0(grid.centers).reshape(shape)
        else:
            values = np.full(shape, q0, dtype=complex)
        return grid.with_potential(values)

    @classmethod
    def from_n0(cls, lower, spacing, n0, k, **kw) -> "PotentialGrid":
        return cls(lower, spacing, k**2 * (1.0 - np.asarray(n0, complex)), k, **kw)

    def with_potential(self, q) -> "PotentialGrid":
        """Same voxelization carrying a different potential."""
        return PotentialGrid(self.lower, self.spacing, np.asarray(q, complex).reshape(self.shape),
                             self.k, self.max_kh)

    @property
    def shape(self) -> tuple:
        return self.q0.shape

    @property
    def size(self) -> int:
        return self.q0.size

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.array(self.shape) * self.spacing

    @property
    def voxel_volume(self) -> float:
        return self.spacing**3

    @property
    def n0(self) -> np.ndarray:
        return 1.0 - self.q0 / self.k**2

    @cached_property
    def centers(self) -> np.ndarray:
        """(size, 3) voxel centres in row-major order."""
        axes = [self.lower[i] + (np.arange(n) + 0.5) * self.spacing for i, n in enumerate(self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def is_free_space(self) -> bool:
        return not np.any(self.q0)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        return np.all((p >= self.lower) & (p <= self.upper), axis=1)

    def voxel_index(self, points) -> np.ndarray:
        """Flat index of the voxel containing each point, -1 outside the box."""
        p = np.atleast_2d(np.asarray(points, float))
        ijk = np.floor((p - self.lower) / self.spacing).astype(np.int64)
        shape = np.array(self.shape)
        # points on the upper faces belong to the last voxel
        on_upper = np.isclose(p, self.upper) & (ijk == shape)
        ijk = np.where(on_upper, shape - 1, ijk)
        inside = np.all((ijk >= 0) & (ijk < shape), axis=1)
        flat = np.ravel_multi_index(np.clip(ijk, 0, shape - 1).T, self.shape)
        return np.where(inside, flat, -1)

    @cached_property
    def engine(self) -> "VolumeEngine":
        return VolumeEngine(self)


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Complex values on every voxel of a grid (row-major ``grid.shape``)."""

    grid: PotentialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, complex).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise SolverError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


class VolumeEngine:
    """Collocation operator for one grid and its potential.

    Holds the (lazily factored) dense system over the active voxels and a
    per-direction cache of solved scattering solutions.
    """

    def __init__(self, grid: PotentialGrid, dense_limit: int = DENSE_LIMIT):
        self.grid = grid
        self.k = grid.k
        self.vol = grid.voxel_volume
        q = grid.q0.ravel()
        self.active = np.flatnonzero(q != 0)
        self.q_active = q[self.active]
        self.ball = ball_integral(self.k, self.vol)
        self.dense_limit = dense_limit
        self._lu = None
        self._matrix = None
        self._solutions: dict[tuple, np.ndarray] = {}

    @property
    def n_active(self) -> int:
        return len(self.active)

    def kernel(self, points, voxels=None) -> np.ndarray:
        """Matrix of voxel integrals of g(x, .) over a sorted set of voxels.

        Entry ``(i, t)`` is ``g(x_i, c_t) * vol``, or the ball integral when
        ``x_i`` lies inside voxel ``t``.  ``voxels`` defaults to the active set.
        """
        voxels = self.active if voxels is None else np.asarray(voxels)
        p = np.atleast_2d(np.asarray(points, float))
        centers = self.grid.centers[voxels]
        K = np.empty((len(p), len(voxels)), complex)
        if len(voxels) == 0:
            return K
        # row blocks keep the temporaries at a few MB per block
        step = max(1, 2**22 // len(voxels))
        for s in range(0, len(p), step):
            blk = p[s : s + step]
            r2 = np.zeros((len(blk), len(voxels)))
            for ax in range(3):
                r2 += np.subtract.outer(blk[:, ax], centers[:, ax]) ** 2
            r = np.sqrt(r2)
            with np.errstate(divide="ignore", invalid="ignore"):
                K[s : s + step] = np.exp(1j * self.k * r) * (self.vol / (4 * np.pi)) / r
        owner = self.grid.voxel_index(p)
        pos = np.clip(np.searchsorted(voxels, owner), 0, len(voxels) - 1)
        rows = np.flatnonzero((owner >= 0) & (voxels[pos] == owner))
        K[rows, pos[rows]] = self.ball
        return K

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            K = self.kernel(self.grid.centers[self.active])
            K *= self.q_active[None, :]
            K[np.diag_indices_from(K)] += 1.0
            self._matrix = K
        return self._matrix

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (I + K q) u = rhs on the active voxels; rhs may be 2-d."""
        rhs = np.asarray(rhs, complex)
        if self.n_active == 0:
            return rhs.copy()
        if self.n_active > self.dense_limit:
            return self._solve_neumann(rhs)
        A = self.matrix()
        if self._lu is None:
            try:
                self._lu = scipy.linalg.lu_factor(A, check_finite=False)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise SolverError(f"dense factorization failed: {exc}") from exc
        u = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
        res = np.linalg.norm(A @ u - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if not np.isfinite(res) or res > RESIDUAL_TOL:
            raise SolverError(f"volume solve residual {res:.3e} exceeds {RESIDUAL_TOL}", residual=res,
                              condition=np.linalg.cond(A))
        return u

    # -- large grids: Neumann series with an FFT convolution -----------------

    @cached_property
    def _fft_kernel(self) -> np.ndarray:
        shape = self.grid.shape
        axes = []
        for n in shape:
            idx = np.arange(2 * n)
            axes.append(np.where(idx < n, idx, idx - 2 * n) * self.grid.spacing)
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        r = np.sqrt(X**2 + Y**2 + Z**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            K = np.exp(1j * self.k * r) / (4 * np.pi * r) * self.vol
        K[0, 0, 0] = self.ball
        return np.fft.fftn(K)

    def _convolve(self, density_full: np.ndarray) -> np.ndarray:
        shape = self.grid.shape
        padded = np.zeros(tuple(2 * n for n in shape), complex)
        padded[: shape[0], : shape[1], : shape[2]] = density_full.reshape(shape)
        out = np.fft.ifftn(np.fft.fftn(padded) * self._fft_kernel)
        return out[: shape[0], : shape[1], : shape[2]].ravel()

    def _solve_neumann(self, rhs: np.ndarray, max_iter: int = 500) -> np.ndarray:
        if rhs.ndim == 2:
            return np.stack([self._solve_neumann(c, max_iter) for c in rhs.T], axis=1)
        q = np.zeros(self.grid.size, complex)
        q[self.active] = self.q_active
        f = np.zeros(self.grid.size, complex)
        f[self.active] = rhs
        norm_f = max(np.linalg.norm(rhs), 1e-300)
        u = f.copy()
        prev = np.inf
        for it in range(max_iter):
            Ku = self._convolve(q * u)
            res = np.linalg.norm((u + Ku - f)[self.active]) / norm_f
            if res <= RESIDUAL_TOL:
                log.debug("Neumann series converged in %d iterations", it)
                return u[self.active]
            if res > prev:
                raise SolverError("Neumann series does not contract for this potential", residual=res)
            prev = res
            u = f - Ku
        raise SolverError(f"Neumann series not converged after {max_iter} iterations", residual=prev)

    # -- solutions -----------------------------------------------------------

    def scattering_density(self, alpha) -> np.ndarray:
        """Solved U0(., alpha) on the active voxels (cached per direction)."""
        key = tuple(np.round(alpha, 15))
        if key not in self._solutions:
            rhs = plane_wave(self.grid.centers[self.active], alpha, self.k)
            self._solutions[key] = self.solve(rhs)
        return self._solutions[key]

    def scattering_at(self, points, alpha) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, float))
        inc = plane_wave(p, alpha, self.k)
        if self.n_active == 0:
            return inc
        u = self.scattering_density(alpha)
        out = np.empty(len(p), complex)
        for s in range(0, len(p), 2048):
            out[s : s + 2048] = inc[s : s + 2048] - self.kernel(p[s : s + 2048]) @ (self.q_active * u)
        return out

    def green_columns(self, sources) -> np.ndarray:
        """G(t, y) on the active voxels for each source y (columns)."""
        y = np.atleast_2d(np.asarray(sources, float))
        if self.n_active == 0:
            return np.zeros((0, len(y)), complex)
        rhs = self.kernel(y).T / self.vol
        return self.solve(rhs)

    def green_matrix(self, targets, sources, columns=None) -> np.ndarray:
        """G(x_i, y_j); targets and sources must not coincide."""
        x = np.atleast_2d(np.asarray(targets, float))
        y = np.atleast_2d(np.asarray(sources, float))
        with np.errstate(divide="ignore", invalid="ignore"):
            G = free_green(x[:, None, :], y[None, :, :], self.k)
        if self.n_active == 0:
            return G
        cols = self.green_columns(y) if columns is None else columns
        return G - self.kernel(x) @ (self.q_active[:, None] * cols)


# -- public operations ---------------------------------------------------------


def solve_scattering_solution(grid: PotentialGrid, alpha) -> ComplexField:
    """Background scattering solution U0(x, alpha) on every voxel."""
    alpha = _unit(alpha)
    return ComplexField(grid, grid.engine.scattering_at(grid.centers, alpha))


def scattering_solution_at(grid: PotentialGrid, points, alpha) -> np.ndarray:
    """U0(x, alpha) at arbitrary points (inside or outside the box)."""
    return grid.engine.scattering_at(points, _unit(alpha))


def residual_norm(grid: PotentialGrid, field_values, incident) -> float:
    """Relative residual of the discrete volume equation on the active voxels."""
    eng = grid.engine
    if eng.n_active == 0:
        return float(np.linalg.norm(field_values - incident) / max(np.linalg.norm(incident), 1e-300))
    u = np.asarray(field_values).ravel()[eng.active]
    f = np.asarray(incident).ravel()[eng.active]
    return float(np.linalg.norm(eng.matrix() @ u - f) / np.linalg.norm(f))


@dataclass(frozen=True, eq=False)
class GreensEvaluator:
    """Background Green's function G(., y) for one source point y."""

    grid: PotentialGrid
    y: np.ndarray
    columns: np.ndarray = field(repr=False)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if np.any(np.linalg.norm(x - self.y, axis=1) == 0):
            raise DomainError("G(x, y) is singular at x = y")
        return self.grid.engine.green_matrix(x, self.y[None], self.columns)[:, 0]

    @cached_property
    def values(self) -> np.ndarray:
        """G(c, y) at voxel centres; the voxel holding y gets its ball average."""
        eng = self.grid.engine
        c = self.grid.centers
        own = self.grid.voxel_index(self.y[None])[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = free_green(c, self.y, self.grid.k)
        if own >= 0:
            direct[own] = eng.ball / eng.vol
        if eng.n_active:
            direct = direct - eng.kernel(c) @ (eng.q_active[:, None] * self.columns)[:, 0]
        return direct.reshape(self.grid.shape)


def greens_function(grid: PotentialGrid, y) -> GreensEvaluator:
    y = np.asarray(y, float).reshape(3)
    if not grid.contains(y)[0]:
        raise DomainError(f"source point {y.tolist()} lies outside the grid box")
    return GreensEvaluator(grid, y, grid.engine.green_columns(y[None]))


def greens_far_field(grid: PotentialGrid, y, beta) -> complex:
    """Coefficient of e^{ik|x|}/|x| in G(x, y) along direction beta."""
    beta = _unit(beta)
    return complex(scattering_solution_at(grid, np.asarray(y, float)[None], -beta)[0] / (4 * np.pi))


def background_amplitude(grid: PotentialGrid, beta, alpha) -> complex:
    """Far-field amplitude A0(beta, alpha) of the background medium alone."""
    beta, alpha = _unit(beta), _unit(alpha)
    eng = grid.engine
    if eng.n_active == 0:
        return 0j
    u = eng.scattering_density(alpha)
    phase = plane_wave(grid.centers[eng.active], -beta, grid.k)
    return complex(-np.sum(phase * eng.q_active * u) * eng.vol / (4 * np.pi))


@dataclass(frozen=True)
class UniquenessReport:
    passed: bool
    max_imag: float
    violations: list

    def to_json(self) -> dict:
        return {"passed": self.passed, "max_imag_q0": self.max_imag,
                "violating_voxels": self.violations}


def validate_uniqueness_background(grid: PotentialGrid) -> UniquenessReport:
    """Check Im q0 <= 0 on every voxel (sufficient for a unique solution)."""
    imag = grid.q0.imag.ravel()
    bad = np.flatnonzero(imag > 0)
    return UniquenessReport(bool(bad.size == 0), float(imag.max()), bad.tolist())
