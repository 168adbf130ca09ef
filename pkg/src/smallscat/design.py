"""Inverse design: particle density N(x) and impedance h(x) for a target n(x).

Given the background ``q0`` and a desired refraction coefficient ``n``, the
required capacitance density is ``Ct = k^2 (1 - n) - q0``.  Writing
``H = b h`` with ``b = |S| / C``, identical particles realize ``Ct`` when

    C N = Ct / H + Ct,

which must be real and non-negative.  For complex ``Ct = Ct1 + i Ct2`` the
imaginary part vanishes iff ``H1^2 + H1 + H2^2 - (Ct1 / Ct2) H2 = 0``; ``H2``
is a free parameter with the sign of ``Ct2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .background import PotentialGrid
from .continuum import (CtildeField, DensityField, ImpedanceField, ctilde_from_density,
                        solve_effective_field)
from .errors import DomainError, InfeasibleDesignError, SmallScatError
from .shapes import ShapeSummary

IMAG_TOL = 1e-10
CONSISTENCY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DesignTarget:
    n_desired: np.ndarray
    grid: PotentialGrid
    shape: ShapeSummary

    def __post_init__(self):
        n = np.asarray(self.n_desired, complex)
        if n.ndim == 0:
            n = np.full(self.grid.shape, complex(n))
        object.__setattr__(self, "n_desired", n.reshape(self.grid.shape))

    @property
    def q(self) -> np.ndarray:
        return self.grid.k**2 * (1.0 - self.n_desired)


@dataclass(frozen=True, eq=False)
class DesignRecipe:
    N: DensityField
    h: ImpedanceField
    H: np.ndarray
    b: float
    ctilde_target: CtildeField
    real_branch: np.ndarray = field(repr=False, default=None)


def required_ctilde(target: DesignTarget) -> CtildeField:
    # k^2 (n0 - n) equals q - q0 but is exactly zero where n == n0
    g = target.grid
    return CtildeField(g, g.k**2 * (g.n0 - np.asarray(target.n_desired, complex)))


def feasible_H2_interval(ct1: float, ct2: float) -> tuple[float, float]:
    """Interval of H2 (with the sign of ct2) giving a real H1."""
    rho = ct1 / ct2
    root = np.sqrt(rho * rho + 1.0)
    lo, hi = (rho - root) / 2, (rho + root) / 2
    return (lo, 0.0) if ct2 < 0 else (0.0, hi)


def solve_H(ct1: float, ct2: float, H2: float, root: str = "larger") -> float:
    """Real part H1 making ``Ct / H + Ct`` real for the given H2."""
    if ct2 == 0:
        raise DomainError("ct2 must be nonzero (use the real-impedance branch)")
    if H2 == 0:
        raise DomainError("H2 must be nonzero")
    if np.sign(H2) != np.sign(ct2):
        raise DomainError(f"H2 = {H2} and Ct2 = {ct2} must have the same sign")
    c = H2 * H2 - (ct1 / ct2) * H2
    disc = 1.0 - 4.0 * c
    if disc < 0:
        if disc > -1e-12:
            disc = 0.0
        else:
            raise InfeasibleDesignError(
                f"no real H1 for H2 = {H2}: discriminant {disc:.3g} < 0",
                interval=feasible_H2_interval(ct1, ct2))
    sq = np.sqrt(disc)
    if root == "larger":
        return float((-1.0 + sq) / 2.0)
    if root == "smaller":
        return float((-1.0 - sq) / 2.0)
    raise ValueError(f"root must be 'larger' or 'smaller', not {root!r}")


def choose_H2(ctilde: np.ndarray, kappa: float = 0.5) -> np.ndarray:
    """Default H2 = kappa Ct2 / |Ct|, clipped into the feasible interval.

    Voxels with Ct2 = 0 get H2 = 0 (they use the real branch).
    """
    ct = np.asarray(ctilde, complex)
    H2 = np.zeros(ct.shape)
    nz = ct.imag != 0
    H2[nz] = kappa * ct.imag[nz] / np.abs(ct[nz])
    ct1, ct2 = ct.real[nz], ct.imag[nz]
    rho = ct1 / ct2
    root = np.sqrt(rho * rho + 1.0)
    bound = np.where(ct2 < 0, (rho - root) / 2, (rho + root) / 2)
    H2[nz] = np.where(np.abs(H2[nz]) > np.abs(bound), bound * (1 - 1e-12), H2[nz])
    return H2


def compute_N(ctilde: CtildeField, H: np.ndarray, shape: ShapeSummary, tol: float = IMAG_TOL) -> DensityField:
    """Number density from C N = Re[Ct / H + Ct]; voxels with Ct = 0 get N = 0."""
    ct = ctilde.values
    H = np.asarray(H, complex).reshape(ct.shape)
    N = np.zeros(ct.shape)
    nz = ct != 0
    if np.any(nz & (H == 0)):
        raise DomainError("H must be nonzero wherever Ct != 0")
    bracket = ct[nz] / H[nz] + ct[nz]
    bad_imag = np.abs(bracket.imag) > tol * np.abs(ct[nz])
    if np.any(bad_imag):
        raise SmallScatError(
            f"inconsistent H: Im[Ct/H + Ct] exceeds tolerance at {int(bad_imag.sum())} voxels")
    N[nz] = bracket.real / shape.capacitance_C
    if np.any(N < -tol * np.abs(ct) / shape.capacitance_C):
        idx = np.flatnonzero(N < 0)
        raise InfeasibleDesignError(f"negative density at {idx.size} voxels", indices=idx.tolist())
    return DensityField(ctilde.grid, np.maximum(N, 0.0))


def impedance_from_H(H: np.ndarray, shape: ShapeSummary, grid: PotentialGrid,
                     mask: np.ndarray | None = None) -> ImpedanceField:
    """h = H / b with b = |S| / C; voxels outside ``mask`` (or with H = 0) are NaN."""
    H = np.asarray(H, complex).reshape(grid.shape)
    h = H / shape.b
    keep = (H != 0) if mask is None else (np.asarray(mask, bool).reshape(grid.shape) & (H != 0))
    return ImpedanceField(grid, np.where(keep, h, np.nan + 0j))


def design(target: DesignTarget, kappa: float = 0.5, H2=None, root: str = "larger",
           real_density=None) -> DesignRecipe:
    """Build N(x), h(x) realizing the target.

    ``H2`` overrides the kappa policy with an explicit per-voxel field.
    Voxels with purely real Ct use ``h = C Ct / (|S| (N C - Ct))`` with
    ``real_density`` (default ``2 |Ct| / C``) as the density.
    """
    ct_field = required_ctilde(target)
    ct = ct_field.values
    shape = target.shape
    C, S = shape.capacitance_C, shape.area
    H2v = choose_H2(ct, kappa) if H2 is None else np.broadcast_to(np.asarray(H2, float), ct.shape).copy()
    H = np.zeros(ct.shape, complex)
    complex_vox = (ct.imag != 0)
    for idx in zip(*np.nonzero(complex_vox)):
        H1 = solve_H(ct.real[idx], ct.imag[idx], H2v[idx], root)
        H[idx] = H1 + 1j * H2v[idx]
    real_vox = (ct.imag == 0) & (ct.real != 0)
    N = np.zeros(ct.shape)
    if np.any(complex_vox):
        N_c = compute_N(CtildeField(target.grid, np.where(complex_vox, ct, 0)), H, shape)
        N[complex_vox] = N_c.values[complex_vox]
    if np.any(real_vox):
        if real_density is None:
            Nr = 2.0 * np.abs(ct.real) / C
        else:
            Nr = np.broadcast_to(np.asarray(real_density, float), ct.shape)
        ct1 = ct.real
        if np.any(real_vox & ~(Nr * C > ct1)) or np.any(real_vox & ~(Nr > 0)):
            raise InfeasibleDesignError("real branch needs N > 0 and N C > Ct1")
        N[real_vox] = Nr[real_vox]
        h_real = C * ct1 / (S * (Nr * C - ct1))
        H[real_vox] = (shape.b * h_real)[real_vox]
    h = impedance_from_H(H, shape, target.grid, mask=N > 0)
    return DesignRecipe(DensityField(target.grid, N), h, H, shape.b, ct_field, real_vox)


@dataclass
class ValidationReport:
    checks: dict
    margins: dict

    @property
    def passed(self) -> bool:
        return all(bool(np.all(v)) for v in self.checks.values())

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "conditions": {name: {"passed": bool(np.all(v)),
                                  "failing_voxels": np.flatnonzero(~np.asarray(v)).tolist()}
                           for name, v in self.checks.items()},
            "worst_margins": {k: float(v) for k, v in self.margins.items()},
        }


def validate_design(recipe: DesignRecipe, target: DesignTarget, imag_tol: float = IMAG_TOL) -> ValidationReport:
    """Per-voxel checks of the uniqueness, positivity, reality and sign conditions."""
    ct = recipe.ctilde_target.values.ravel()
    H = np.asarray(recipe.H, complex).ravel()
    h = recipe.h.values.ravel()
    N = recipe.N.values.ravel()
    q_imag = (target.grid.q0.ravel() + ct).imag
    occupied = N > 0
    h_imag = np.where(occupied, np.nan_to_num(h.imag, nan=0.0), 0.0)
    nz = ct != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bracket = np.where(nz & (H != 0), ct / H + ct, 0.0)
    C = target.shape.capacitance_C
    imag_res = np.abs(bracket.imag)
    both = (ct.imag != 0) & (H.imag != 0)
    checks = {
        "im_q_nonpositive": q_imag <= 0,
        "im_h_nonpositive": h_imag <= 0,
        "positivity": ~nz | (bracket.real > 0),
        "imag_residual": imag_res <= imag_tol * np.maximum(np.abs(ct), 1e-300),
        "same_sign": ~both | (np.sign(H.imag) == np.sign(ct.imag)),
        "N_nonnegative": N >= 0,
        "N_matches_bracket": ~nz | np.isclose(N * C, bracket.real, rtol=1e-10, atol=0),
    }
    margins = {
        "max_im_q": float(q_imag.max(initial=-np.inf)),
        "max_im_h": float(h_imag.max(initial=-np.inf)),
        "min_CN": float((bracket.real[nz]).min(initial=np.inf)),
        "max_imag_residual": float(imag_res.max(initial=0.0)),
        "min_N": float(N.min(initial=np.inf)),
    }
    # second displayed Im h formula, checked against Im of the first
    if np.any(occupied & nz):
        sel = occupied & nz
        ct1, ct2 = ct.real[sel], ct.imag[sel]
        S = target.shape.area
        im_h_alt = (C / S) * ct2 * C * N[sel] / ((N[sel] * C - ct1) ** 2 + ct2**2)
        diag = np.abs(im_h_alt - h.imag[sel]) / np.maximum(np.abs(h[sel]), 1e-300)
        margins["im_h_formula_gap"] = float(diag.max())
    return ValidationReport(checks, margins)


@dataclass
class RoundtripReport:
    recipe: DesignRecipe
    ctilde_recovered: CtildeField
    max_rel_error: float
    n_realized: np.ndarray
    max_n_error: float
    validation: ValidationReport
    field: object = None

    def to_json(self) -> dict:
        return {"max_rel_ctilde_error": self.max_rel_error, "max_n_error": self.max_n_error,
                "validation": self.validation.to_json()}


def roundtrip_design(target: DesignTarget, kappa: float = 0.5, alpha=None, **kw) -> RoundtripReport:
    """Design, rebuild Ct from (N, h), and optionally forward-solve the result."""
    stage = "design"
    try:
        recipe = design(target, kappa, **kw)
        stage = "ctilde_from_density"
        recovered = ctilde_from_density(recipe.N, recipe.h, target.shape)
        stage = "forward"
        U_e = None
        if alpha is not None:
            U_e = solve_effective_field(target.grid, recovered, alpha, route="potential")
    except SmallScatError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc
    ct = recipe.ctilde_target.values
    nz = ct != 0
    err = np.abs(recovered.values - ct)
    rel = float((err[nz] / np.abs(ct[nz])).max(initial=0.0))
    if np.any(~nz & (recovered.values != 0)):
        rel = float("inf")
    n_real = 1.0 - (target.grid.q0 + recovered.values) / target.grid.k**2
    n_err = float(np.abs(n_real - target.n_desired).max())
    return RoundtripReport(recipe, recovered, rel, n_real, n_err, validate_design(recipe, target), U_e)


def spacing_estimate(ctilde_density: float, ctilde_particle: float) -> float:
    """Lattice spacing d giving density Ct from particles of capacitance Ct_m: d^3 = Ct_m / Ct."""
    return float(np.cbrt(abs(ctilde_particle) / abs(ctilde_density)))
