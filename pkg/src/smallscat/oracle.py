"""Independent reference solutions used to check the small-particle theory.

* exact partial-wave scattering by one impedance sphere in free space,
* first-order Born amplitudes of a voxelized potential,
* numerical far-field extraction from any field sampler.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import eval_legendre, spherical_jn, spherical_yn

from .background import PotentialGrid, plane_wave
from .errors import DomainError, RegimeWarning


@dataclass(frozen=True)
class RobinSphereSpec:
    radius: float
    h: complex
    k: float
    l_max: int | None = None
    tol: float = 1e-14

    def __post_init__(self):
        if not (self.radius > 0 and self.k > 0):
            raise DomainError("radius and k must be positive")
        if self.l_max is not None and self.l_max < 0:
            raise DomainError("l_max must be >= 0")


def robin_coefficients(spec: RobinSphereSpec) -> np.ndarray:
    """Partial-wave coefficients T_l for du/dr = h u on r = a.

    The exterior field is ``sum_l i^l (2l+1) [j_l(kr) + T_l h_l(kr)] P_l``.
    """
    x = spec.k * spec.radius
    if spec.l_max is None:
        l_max = int(np.ceil(x + 4 * np.cbrt(x) + 8))
    else:
        l_max = spec.l_max
    if x < 1e-8 or x > 1e3:
        raise OverflowError(f"ka = {x:.3g} outside the supported range")
    l = np.arange(l_max + 1)
    j = spherical_jn(l, x)
    jp = spherical_jn(l, x, derivative=True)
    y = spherical_yn(l, x)
    yp = spherical_yn(l, x, derivative=True)
    if not np.all(np.isfinite(y)):
        raise OverflowError("spherical Bessel overflow; lower l_max")
    hl = j + 1j * y
    hlp = jp + 1j * yp
    k, h = spec.k, complex(spec.h)
    return -(k * jp - h * j) / (k * hlp - h * hl)


def robin_sphere_amplitude(spec: RobinSphereSpec, beta, alpha) -> complex:
    """Far-field amplitude of a sphere centred at the origin.

    The sum is truncated once successive terms drop below ``spec.tol``;
    a zero-order sphere has amplitude ``-h a^2 / (1 + h a)`` as ``ka -> 0``.
    """
    T = robin_coefficients(spec)
    cos_t = float(np.clip(np.dot(beta, alpha), -1.0, 1.0))
    l = np.arange(len(T))
    terms = (2 * l + 1) * T * eval_legendre(l, cos_t)
    return complex(terms.sum() / (1j * spec.k))


def robin_tail(spec: RobinSphereSpec) -> float:
    """Magnitude of the last retained partial-wave term (truncation estimate)."""
    T = robin_coefficients(spec)
    return float((2 * (len(T) - 1) + 1) * abs(T[-1]) / spec.k)


def scattering_length(radius: float, h: complex) -> complex:
    return h * radius**2 / (1 + h * radius)


def born_amplitude(grid: PotentialGrid, beta, alpha, potential=None) -> complex:
    """First-order Born amplitude -(1/4pi) sum e^{ik(alpha-beta).y} q(y) vol.

    ``potential`` defaults to the grid's own ``q0``; pass ``q0 + Ct`` to get
    the Born amplitude of the combined medium.
    """
    q = grid.q0 if potential is None else np.asarray(potential, complex)
    q = q.ravel()
    mask = q != 0
    if not mask.any():
        return 0j
    y = grid.centers[mask]
    phase = plane_wave(y, np.asarray(alpha, float) - np.asarray(beta, float), grid.k)
    return complex(-np.sum(phase * q[mask]) * grid.voxel_volume / (4 * np.pi))


def ball_form_factor(q: complex, radius: float, k: float, beta, alpha) -> complex:
    """Born amplitude of a constant potential q on a ball (closed form)."""
    kappa = k * np.linalg.norm(np.asarray(alpha, float) - np.asarray(beta, float))
    R = radius
    if kappa * R < 1e-6:
        integral = 4 * np.pi * R**3 / 3
    else:
        integral = 4 * np.pi / kappa**3 * (np.sin(kappa * R) - kappa * R * np.cos(kappa * R))
    return complex(-q * integral / (4 * np.pi))


@dataclass(frozen=True)
class FarFieldEstimate:
    value: complex
    at_R: complex
    at_2R: complex


def farfield_extract(sampler, k: float, beta, R: float, alpha=None) -> FarFieldEstimate:
    """Amplitude of e^{ikr}/r in ``sampler`` along ``beta``.

    ``sampler(points)`` returns the total field; the incident plane wave
    (direction ``alpha``, or none when ``alpha`` is None) is subtracted.
    Samples at R and 2R are combined by Richardson extrapolation in 1/R.
    """
    if k * R < 20:
        warnings.warn(f"kR = {k * R:.3g} < 20: far-field extraction is unreliable", RegimeWarning,
                      stacklevel=2)
    beta = np.asarray(beta, float)

    def raw(r):
        x = (r * beta)[None]
        u = np.asarray(sampler(x)).ravel()[0]
        if alpha is not None:
            u = u - plane_wave(x, alpha, k)[0]
        return u * r * np.exp(-1j * k * r)

    a1, a2 = raw(R), raw(2 * R)
    return FarFieldEstimate(complex(2 * a2 - a1), complex(a1), complex(a2))
