"""Particle geometry: closed triangle meshes and their electrostatic summaries.

A particle enters the scattering theory only through three numbers: its
surface area ``|S|``, the self-interaction integral

    J = \\int_S \\int_S ds dt / |s - t|,

and the capacitance estimate ``C = 4 pi |S|^2 / J`` (Gaussian units, so a
sphere of radius ``a`` has ``C = 4 pi a``).  Together with a boundary
impedance ``h`` they give the effective capacitance
``C / (1 + C / (h |S|))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidMeshError, ResonanceError

RESONANCE_EPS = 1e-8

# Dunavant degree-5 rule, barycentric coordinates and weights (sum to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_QUAD_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_QUAD_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Closed, consistently oriented triangle surface.

    Parameters
    ----------
    vertices : (V, 3) array
    panels : (P, 3) int array
        Vertex indices of each triangle, counter-clockwise seen from outside.
    """

    vertices: np.ndarray
    panels: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        p = np.ascontiguousarray(self.panels, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or p.ndim != 2 or p.shape[1] != 3:
            raise InvalidMeshError("vertices must be (V, 3) and panels (P, 3)")
        if len(p) == 0:
            raise InvalidMeshError("mesh has no panels")
        if p.min() < 0 or p.max() >= len(v):
            raise InvalidMeshError("panel references a missing vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "panels", p)

    @property
    def corners(self) -> np.ndarray:
        """(P, 3, 3) array of panel corner coordinates."""
        return self.vertices[self.panels]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def panel_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def panel_normals(self) -> np.ndarray:
        n = np.linalg.norm(self._cross, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._cross / n[:, None]

    @cached_property
    def panel_centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        # chunked max pairwise distance
        best = 0.0
        for start in range(0, len(v), 512):
            d = np.linalg.norm(v[start : start + 512, None, :] - v[None, :, :], axis=-1)
            best = max(best, float(d.max()))
        return best

    @cached_property
    def volume(self) -> float:
        """Signed enclosed volume; positive for outward orientation."""
        c = self.corners
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def validate(self) -> "SurfaceMesh":
        """Check closedness, orientation and panel areas; return self."""
        if np.any(self.panel_areas <= 0.0):
            bad = np.flatnonzero(self.panel_areas <= 0.0)
            raise InvalidMeshError(f"degenerate panels (zero area): {bad[:10].tolist()}")
        p = self.panels
        directed = np.concatenate([p[:, [0, 1]], p[:, [1, 2]], p[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        if np.any(counts != 2):
            raise InvalidMeshError("mesh is not closed: some edge is not shared by exactly 2 panels")
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts != 1):
            raise InvalidMeshError("inconsistent panel orientation")
        if self.volume <= 0.0:
            raise InvalidMeshError("panels are oriented inward (negative enclosed volume)")
        if self.diameter <= 0.0:
            raise InvalidMeshError("mesh diameter is zero")
        return self

    def scaled(self, factor: float) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices * factor, self.panels)

    def translated(self, offset) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices + np.asarray(offset, dtype=float), self.panels)


@dataclass(frozen=True)
class ShapeSummary:
    """Scalar summaries of one particle shape (all in length units L)."""

    area: float
    self_integral_J: float
    capacitance_C: float
    diameter: float

    def __post_init__(self):
        if not (self.area > 0 and self.self_integral_J > 0 and self.capacitance_C > 0):
            raise InvalidMeshError("area, J and C must all be positive")
        if not self.diameter > 0:
            raise InvalidMeshError("diameter must be positive")

    @property
    def radius(self) -> float:
        """Half the diameter (the particle size ``a``)."""
        return 0.5 * self.diameter

    @property
    def b(self) -> float:
        """Ratio |S| / C used by the impedance parametrization H = b h."""
        return self.area / self.capacitance_C

    @classmethod
    def sphere(cls, radius: float) -> "ShapeSummary":
        """Exact summaries of a sphere of the given radius."""
        a = float(radius)
        return cls(4 * np.pi * a**2, 16 * np.pi**2 * a**3, 4 * np.pi * a, 2 * a)

    def scaled(self, factor: float) -> "ShapeSummary":
        c = float(factor)
        return ShapeSummary(self.area * c**2, self.self_integral_J * c**3,
                            self.capacitance_C * c, self.diameter * c)

    def to_json(self) -> dict:
        d = asdict(self)
        return {"area": d["area"], "J": d["self_integral_J"], "C": d["capacitance_C"],
                "diameter": d["diameter"]}

    @classmethod
    def from_json(cls, record: dict) -> "ShapeSummary":
        return cls(float(record["area"]), float(record["J"]), float(record["C"]),
                   float(record["diameter"]))


# -- mesh generators ---------------------------------------------------------


def uv_sphere(radius: float = 1.0, n_theta: int = 8, n_phi: int | None = None) -> SurfaceMesh:
    """Latitude/longitude triangulation of a sphere.

    ``n_theta`` latitude bands, ``n_phi`` (default ``2 * n_theta``) longitude
    sectors; vertices lie exactly on the sphere.
    """
    if n_theta < 2:
        raise InvalidMeshError("n_theta must be >= 2")
    n_phi = 2 * n_theta if n_phi is None else n_phi
    if n_phi < 3:
        raise InvalidMeshError("n_phi must be >= 3")
    theta = np.linspace(0.0, np.pi, n_theta + 1)[1:-1]
    phi = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    vertices = np.vstack([[0.0, 0.0, 1.0], ring.reshape(-1, 3), [0.0, 0.0, -1.0]]) * radius
    south = len(vertices) - 1

    def vid(i, j):
        return 1 + i * n_phi + (j % n_phi)

    panels = []
    for j in range(n_phi):
        panels.append([0, vid(0, j), vid(0, j + 1)])
    for i in range(n_theta - 2):
        for j in range(n_phi):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            panels.append([a, c, d])
            panels.append([a, d, b])
    for j in range(n_phi):
        panels.append([south, vid(n_theta - 2, j + 1), vid(n_theta - 2, j)])
    return SurfaceMesh(vertices, np.array(panels)).validate()


def cube_mesh(side: float = 1.0, n: int = 2) -> SurfaceMesh:
    """Axis-aligned cube centred at the origin, each face split into n x n squares."""
    if n < 1:
        raise InvalidMeshError("n must be >= 1")
    s = np.linspace(-0.5, 0.5, n + 1)
    index: dict[tuple, int] = {}
    vertices: list[tuple] = []
    panels: list[list[int]] = []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(vertices)
            vertices.append(key)
        return index[key]

    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            for i in range(n):
                for j in range(n):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = 0.5 * sign
                        p[u_ax] = s[i + du]
                        p[v_ax] = s[j + dv]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    # (u, v, axis) is right-handed for axis 0 and 2 only
                    outward = (sign > 0) == (axis != 1)
                    if outward:
                        panels += [[a, b, c], [a, c, d]]
                    else:
                        panels += [[a, c, b], [a, d, c]]
    return SurfaceMesh(np.array(vertices) * side, np.array(panels)).validate()


def read_off(path) -> SurfaceMesh:
    """Read a triangle mesh in OFF format (quads and larger faces are fanned)."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise InvalidMeshError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4
        verts = np.array(tokens[pos : pos + 3 * nv], dtype=float).reshape(nv, 3)
        pos += 3 * nv
        panels = []
        for _ in range(nf):
            cnt = int(tokens[pos])
            idx = [int(t) for t in tokens[pos + 1 : pos + 1 + cnt]]
            pos += 1 + cnt
            panels += [[idx[0], idx[i], idx[i + 1]] for i in range(1, cnt - 1)]
    except (IndexError, ValueError) as exc:
        raise InvalidMeshError(f"{path}: malformed OFF file ({exc})") from exc
    return SurfaceMesh(verts, np.array(panels)).validate()


def write_off(mesh: SurfaceMesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.panels)} 0"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in p) for p in mesh.panels]
    Path(path).write_text("\n".join(lines) + "\n")


# -- summaries ---------------------------------------------------------------


def surface_area(mesh: SurfaceMesh) -> float:
    if np.any(mesh.panel_areas <= 0.0):
        raise InvalidMeshError("degenerate panel (zero area)")
    return float(mesh.panel_areas.sum())


def _edge_log(R, l, R0sq):
    # log(R + l) computed without cancellation when l < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(l >= 0, np.log(R + l), np.log(R0sq) - np.log(R - l))


def triangle_potential(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Exact integral of 1/|x - t| over flat triangles.

    Parameters
    ----------
    points : (n, 3) array
        Observation points ``x``.
    corners : (n, 3, 3) array
        Matching triangles; row ``i`` of the result pairs ``points[i]`` with
        ``corners[i]``.
    """
    x = np.asarray(points, dtype=float)
    c = np.asarray(corners, dtype=float)
    normal = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    d = np.einsum("ij,ij->i", x - c[:, 0], normal)
    absd = np.abs(d)
    rho = x - d[:, None] * normal
    total = np.zeros(len(x))
    for i in range(3):
        a = c[:, i]
        b = c[:, (i + 1) % 3]
        edge = b - a
        length = np.linalg.norm(edge, axis=1)
        s = edge / length[:, None]
        m = np.cross(s, normal)
        l_plus = np.einsum("ij,ij->i", b - rho, s)
        l_minus = np.einsum("ij,ij->i", a - rho, s)
        t0 = np.einsum("ij,ij->i", a - rho, m)
        r0sq = t0 * t0 + d * d
        r_plus = np.linalg.norm(x - b, axis=1)
        r_minus = np.linalg.norm(x - a, axis=1)
        on_line = np.abs(t0) <= 1e-14 * length
        with np.errstate(invalid="ignore"):
            log_term = _edge_log(r_plus, l_plus, r0sq) - _edge_log(r_minus, l_minus, r0sq)
        total += np.where(on_line, 0.0, t0 * log_term)
        with np.errstate(divide="ignore", invalid="ignore"):
            ang = np.arctan2(t0 * l_plus, r0sq + absd * r_plus) - np.arctan2(
                t0 * l_minus, r0sq + absd * r_minus
            )
        total -= np.where(absd > 0, absd * ang, 0.0)
    return total


def self_integral_J(mesh: SurfaceMesh, near_factor: float = 3.0, chunk: int = 256) -> float:
    """Double surface integral of 1/|s - t| over the mesh.

    Panel pairs closer than ``near_factor`` panel sizes use the exact inner
    potential of the source panel evaluated at the 7 Dunavant points of the
    target panel; all other pairs use the centroid-product rule.
    """
    mesh.validate()
    areas = mesh.panel_areas
    cent = mesh.panel_centroids
    corners = mesh.corners
    size = np.sqrt(2.0 * areas)
    quad_pts = np.einsum("qk,pkj->pqj", _QUAD_BARY, corners)  # (P, 7, 3)
    n_pan = len(areas)
    total = 0.0
    near_i, near_j = [], []
    for start in range(0, n_pan, chunk):
        stop = min(start + chunk, n_pan)
        dist = np.linalg.norm(cent[start:stop, None, :] - cent[None, :, :], axis=-1)
        thresh = near_factor * np.maximum(size[start:stop, None], size[None, :])
        near = dist < thresh
        with np.errstate(divide="ignore"):
            far_vals = np.where(near, 0.0, areas[start:stop, None] * areas[None, :] / dist)
        total += far_vals.sum()
        ii, jj = np.nonzero(near)
        near_i.append(ii + start)
        near_j.append(jj)
    ii = np.concatenate(near_i)
    jj = np.concatenate(near_j)
    for start in range(0, len(ii), 20000):
        i = ii[start : start + 20000]
        j = jj[start : start + 20000]
        pts = quad_pts[i].reshape(-1, 3)
        src = np.repeat(corners[j], len(_QUAD_W), axis=0)
        pot = triangle_potential(pts, src).reshape(len(i), len(_QUAD_W))
        total += float((pot @ _QUAD_W * areas[i]).sum())
    return float(total)


def capacitance(mesh: SurfaceMesh, J: float | None = None) -> float:
    """Capacitance estimate 4 pi |S|^2 / J (a sphere gives 4 pi a)."""
    area = surface_area(mesh)
    J = self_integral_J(mesh) if J is None else J
    return float(4.0 * np.pi * area**2 / J)


def summarize(mesh: SurfaceMesh) -> ShapeSummary:
    mesh.validate()
    area = surface_area(mesh)
    J = self_integral_J(mesh)
    return ShapeSummary(area, J, capacitance(mesh, J), mesh.diameter)


def effective_capacitance(C, area, h, eps: float = RESONANCE_EPS):
    """Impedance-corrected capacitance ``C / (1 + C / (h |S|))``.

    Works elementwise on arrays of ``h`` (and ``C``, ``area``).  Raises
    :class:`ResonanceError` when ``|1 + C/(h|S|)| < eps`` or ``h == 0``.
    """
    h_arr = np.asarray(h, dtype=complex)
    C_arr = np.asarray(C, dtype=float)
    S_arr = np.asarray(area, dtype=float)
    if np.any(C_arr <= 0) or np.any(S_arr <= 0):
        raise ValueError("capacitance and area must be positive")
    if np.any(h_arr == 0):
        raise ResonanceError("h = 0 (Neumann particle) is not supported",
                             indices=np.flatnonzero(h_arr.ravel() == 0))
    denom = 1.0 + C_arr / (h_arr * S_arr)
    bad = np.abs(denom) < eps
    if np.any(bad):
        raise ResonanceError(f"resonant impedance: |1 + C/(h|S|)| < {eps}",
                             indices=np.flatnonzero(np.broadcast_to(bad, denom.shape).ravel()))
    value = C_arr / denom
    return complex(value) if value.ndim == 0 else value


def shape_summary_json(summary: ShapeSummary) -> str:
    return json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n"
