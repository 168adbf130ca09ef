"""Many small impedance particles: charges, fields and scattering amplitude.

Each particle m is reduced to one complex charge ``Q_m``.  With the effective
capacitance ``Ct_m = C / (1 + C / (h_m |S|))`` the charges solve

    Q_j + sum_{m != j} G(x_j, x_m) Ct_j Q_m = -Ct_j U0(x_j),

written here as ``(I + A) Q = b``.  When the row sums of ``|A|`` stay below
one the system is also solved by plain fixed-point iteration started from
``Q = b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .background import RESIDUAL_TOL, PotentialGrid, background_amplitude, free_green, plane_wave
from .errors import (ConvergenceError, DomainError, DominanceError, RegimeWarning,
                     SolverError)
from .shapes import RESONANCE_EPS, ShapeSummary, effective_capacitance

REGIME_THRESHOLD = 0.1


def _unit(v):
    v = np.asarray(v, float).reshape(3)
    n = np.linalg.norm(v)
    if not np.isclose(n, 1.0, atol=1e-12):
        raise DomainError(f"direction must be a unit vector, got |v| = {n}")
    return v / n


@dataclass(frozen=True, eq=False)
class ParticleConfiguration:
    """Particle centres, impedances and shapes in a (possibly free) background.

    ``shape`` is either one :class:`ShapeSummary` shared by all particles or a
    sequence with one entry per particle.  ``background=None`` means free
    space (q0 = 0 everywhere).
    """

    centers: np.ndarray
    h: np.ndarray
    shape: ShapeSummary | Sequence[ShapeSummary]
    k: float
    background: PotentialGrid | None = None
    require_uniqueness: bool = False
    resonance_eps: float = RESONANCE_EPS

    def __post_init__(self):
        c = np.asarray(self.centers, float).reshape(-1, 3)
        h = np.broadcast_to(np.asarray(self.h, complex), (len(c),)).copy()
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "h", h)
        if self.k <= 0:
            raise DomainError("k must be positive")
        if not isinstance(self.shape, ShapeSummary) and len(self.shape) != len(c):
            raise DomainError("need one shape summary per particle")
        if self.background is not None:
            if not np.isclose(self.background.k, self.k):
                raise DomainError("background grid and configuration use different k")
            outside = ~self.background.contains(c) if len(c) else np.zeros(0, bool)
            if np.any(outside):
                raise DomainError(f"particles outside the domain: {np.flatnonzero(outside)[:10].tolist()}")
        if len(c) > 1:
            d, _ = _min_distance(c)
            if d == 0.0:
                raise DomainError("coincident particle centres")
            if d < np.max(self.diameters) * (1 - 1e-12):
                raise DomainError(f"particles overlap: min distance {d:.3g} < diameter {np.max(self.diameters):.3g}")
        if self.require_uniqueness and np.any(self.h.imag > 0):
            raise DomainError("uniqueness requires Im h <= 0 for every particle")

    @property
    def M(self) -> int:
        return len(self.centers)

    @property
    def diameters(self) -> np.ndarray:
        if isinstance(self.shape, ShapeSummary):
            return np.full(self.M, self.shape.diameter)
        return np.array([s.diameter for s in self.shape])

    @cached_property
    def ctilde(self) -> np.ndarray:
        """Per-particle effective capacitances (length units)."""
        if self.M == 0:
            return np.zeros(0, complex)
        if isinstance(self.shape, ShapeSummary):
            C, S = self.shape.capacitance_C, self.shape.area
        else:
            C = np.array([s.capacitance_C for s in self.shape])
            S = np.array([s.area for s in self.shape])
        return np.atleast_1d(effective_capacitance(C, S, self.h, self.resonance_eps))

    def u0(self, points, alpha) -> np.ndarray:
        if self.background is None:
            return plane_wave(np.atleast_2d(points), alpha, self.k)
        return self.background.engine.scattering_at(points, alpha)

    def green(self, targets, sources) -> np.ndarray:
        x = np.atleast_2d(np.asarray(targets, float))
        y = np.atleast_2d(np.asarray(sources, float))
        if self.background is None or self.background.is_free_space:
            with np.errstate(divide="ignore", invalid="ignore"):
                return free_green(x[:, None, :], y[None, :, :], self.k)
        return self.background.engine.green_matrix(x, y, self._green_columns if y is self.centers else None)

    @cached_property
    def _green_columns(self):
        return self.background.engine.green_columns(self.centers)

    def translated(self, offset) -> "ParticleConfiguration":
        return ParticleConfiguration(self.centers + np.asarray(offset, float), self.h, self.shape,
                                     self.k, self.background, self.require_uniqueness,
                                     self.resonance_eps)


def _min_distance(centers: np.ndarray):
    tree = cKDTree(centers)
    dist, idx = tree.query(centers, k=2)
    i = int(np.argmin(dist[:, 1]))
    return float(dist[i, 1]), (i, int(idx[i, 1]))


@dataclass(frozen=True)
class RegimeReport:
    a: float
    d: float
    wavelength: float
    ka: float
    a_over_d: float
    error_scale: float
    ka_warning: bool
    a_over_d_warning: bool

    def to_json(self) -> dict:
        return {k: (v if np.isfinite(v) else None) if isinstance(v, float) else v
                for k, v in self.__dict__.items()}


def compute_regime(config: ParticleConfiguration, threshold: float = REGIME_THRESHOLD) -> RegimeReport:
    """Small-particle regime numbers ``a``, ``d``, wavelength, ``ka`` and ``a/d``."""
    if config.M < 1:
        raise DomainError("need at least one particle")
    a = 0.5 * float(np.max(config.diameters))
    if config.M > 1:
        d, _ = _min_distance(config.centers)
        if d == 0.0:
            raise DomainError("coincident particle centres")
    else:
        d = np.inf
    if config.background is None:
        n0 = 1.0
    else:
        n0 = float(np.mean(config.background.n0.real))
    wavelength = 2 * np.pi / (config.k * np.sqrt(n0))
    ka = config.k * a
    a_over_d = a / d
    return RegimeReport(a, d, wavelength, ka, a_over_d, ka + a_over_d,
                        ka > threshold, a_over_d > threshold)


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """``(I + A) Q = b`` with zero-diagonal coupling ``A``."""

    A: np.ndarray
    b: np.ndarray
    ctilde: np.ndarray
    u0: np.ndarray
    alpha: np.ndarray

    @property
    def M(self) -> int:
        return len(self.b)

    def full(self) -> np.ndarray:
        return np.eye(self.M, dtype=complex) + self.A


def assemble_system(config: ParticleConfiguration, alpha) -> SystemMatrix:
    alpha = _unit(alpha)
    x = config.centers
    if config.M > 1:
        d, pair = _min_distance(x)
        if d < np.max(config.diameters) * (1 - 1e-12):
            raise DomainError(f"particles {pair} overlap")
    ct = config.ctilde
    u0 = config.u0(x, alpha)
    G = config.green(x, x)
    np.fill_diagonal(G, 0.0)
    A = G * ct[:, None]
    if not np.all(np.isfinite(A)):
        raise SolverError("non-finite coupling entries")
    return SystemMatrix(A, -ct * u0, ct, u0, alpha)


def check_dominance(system: SystemMatrix) -> float:
    """Largest off-diagonal row sum of ``|A|``; iteration converges when < 1."""
    if system.M == 0:
        return 0.0
    return float(np.abs(system.A).sum(axis=1).max())


@dataclass(frozen=True, eq=False)
class ChargeVector:
    Q: np.ndarray
    alpha: np.ndarray
    residual: float = 0.0

    def __len__(self):
        return len(self.Q)


def solve_direct(system: SystemMatrix, residual_tol: float = RESIDUAL_TOL) -> ChargeVector:
    if system.M == 0:
        return ChargeVector(np.zeros(0, complex), system.alpha)
    M = system.full()
    try:
        Q = np.linalg.solve(M, system.b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular charge system: {exc}", condition=np.linalg.cond(M)) from exc
    res = np.linalg.norm(M @ Q - system.b) / max(np.linalg.norm(system.b), 1e-300)
    if not np.isfinite(res) or res > residual_tol:
        raise SolverError(f"charge system residual {res:.3e}", residual=res,
                          condition=np.linalg.cond(M))
    return ChargeVector(Q, system.alpha, float(res))


@dataclass
class IterationTrace:
    """Per-iteration history of the fixed-point solve.

    ``steps[n]`` is the max-norm of ``Q^(n+1) - Q^(n)``; ``errors`` is filled
    (max-norm distance to ``reference``) only when a reference was given.
    """

    ratio: float
    steps: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.steps)


def solve_iterative(system: SystemMatrix, n_max: int = 1000, tol: float = 1e-12,
                    force: bool = False, reference: np.ndarray | None = None):
    """Fixed-point iteration ``Q <- b - A Q`` starting from ``Q = b``.

    Stops when the max-norm of the update falls below ``tol`` times the
    max-norm of the iterate.  Returns ``(ChargeVector, IterationTrace)``.
    """
    r = check_dominance(system)
    if r >= 1.0 and not force:
        raise DominanceError(f"dominance ratio r = {r:.3f} >= 1; pass force=True to iterate anyway", ratio=r)
    trace = IterationTrace(ratio=r)
    Q = system.b.copy()
    if reference is not None:
        trace.errors.append(float(np.max(np.abs(Q - reference), initial=0.0)))
    for _ in range(n_max):
        Q_new = system.b - system.A @ Q
        step = float(np.max(np.abs(Q_new - Q), initial=0.0))
        Q = Q_new
        trace.steps.append(step)
        if reference is not None:
            trace.errors.append(float(np.max(np.abs(Q - reference), initial=0.0)))
        if not np.isfinite(step):
            break
        if step <= tol * max(float(np.max(np.abs(Q), initial=0.0)), 1e-300):
            trace.converged = True
            res = np.linalg.norm(Q + system.A @ Q - system.b) / max(np.linalg.norm(system.b), 1e-300)
            return ChargeVector(Q, system.alpha, float(res)), trace
    raise ConvergenceError(f"iteration did not converge in {n_max} steps (r = {r:.3f})", trace=trace)


def _check_validity(config, x, exclude, radius):
    if config.M == 0:
        return
    dist = np.linalg.norm(x[:, None, :] - config.centers[None, :, :], axis=-1)
    if exclude is not None:
        dist[:, exclude] = np.inf
    if np.any(dist < radius):
        warnings.warn("field evaluated within the validity radius of a particle", RegimeWarning,
                      stacklevel=3)


def effective_field(config: ParticleConfiguration, charges: ChargeVector, x,
                    exclude: int | None = None) -> np.ndarray:
    """Field acting on particle ``exclude`` (or the full field when ``None``)."""
    x = np.atleast_2d(np.asarray(x, float))
    _check_validity(config, x, exclude, 0.5 * float(np.max(config.diameters, initial=0.0)))
    u = config.u0(x, charges.alpha)
    if config.M == 0:
        return u
    keep = np.ones(config.M, bool)
    if exclude is not None:
        keep[exclude] = False
    if not keep.any():
        return u
    G = config.green(x, config.centers[keep])
    return u + G @ charges.Q[keep]


def effective_field_at_particles(config: ParticleConfiguration, charges: ChargeVector) -> np.ndarray:
    """U_e(x_j) with particle j excluded, for every j at once."""
    if config.M == 0:
        return np.zeros(0, complex)
    G = config.green(config.centers, config.centers)
    np.fill_diagonal(G, 0.0)
    return config.u0(config.centers, charges.alpha) + G @ charges.Q


def total_field(config: ParticleConfiguration, charges: ChargeVector, x) -> np.ndarray:
    """U0 plus the field of all point charges; valid at distance > d from every centre."""
    x = np.atleast_2d(np.asarray(x, float))
    if config.M > 1:
        d, _ = _min_distance(config.centers)
    else:
        d = 0.5 * float(np.max(config.diameters, initial=0.0))
    _check_validity(config, x, None, d)
    u = config.u0(x, charges.alpha)
    if config.M == 0:
        return u
    return u + config.green(x, config.centers) @ charges.Q


def discrete_amplitude(config: ParticleConfiguration, charges: ChargeVector, beta) -> complex:
    beta = _unit(beta)
    if config.background is None:
        A0 = 0j
    else:
        A0 = background_amplitude(config.background, beta, charges.alpha)
    if config.M == 0:
        return A0
    u0_back = config.u0(config.centers, -beta)
    return complex(A0 + np.sum(u0_back * charges.Q) / (4 * np.pi))


def solve(config: ParticleConfiguration, alpha, method: str = "direct", **kw) -> ChargeVector:
    """Assemble and solve in one call."""
    system = assemble_system(config, alpha)
    if method == "direct":
        return solve_direct(system, **kw)
    Q, _ = solve_iterative(system, **kw)
    return Q
