"""Command-line front end.

Every command reads a JSON config (validated against the packaged schema),
writes its artifacts atomically into ``<out>/<timestamp>-<hash>/`` and
records a deterministic ``manifest.json`` next to them.  Wall-clock timings
go to ``timings.txt`` so that the CSV and JSON outputs stay byte-identical
across repeated runs.

Exit codes: 0 success, 1 numerical/domain error, 2 usage or config error,
3 artifacts written but a validation check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .background import PotentialGrid, plane_wave, residual_norm, validate_uniqueness_background
from .continuum import (CtildeField, DensityField, ImpedanceField, continuum_amplitude,
                        ctilde_from_density, solve_effective_field)
from .design import DesignTarget, roundtrip_design, validate_design
from .discrete import (ParticleConfiguration, assemble_system, check_dominance, compute_regime,
                       discrete_amplitude, solve_direct, solve_iterative, total_field)
from .errors import ConfigurationError, SmallScatError
from .io import (atomic_write_text, parse_complex, read_field, read_grid, write_csv, write_field,
                 write_json)
from .placement import PlacementSpec, place_particles
from .shapes import ShapeSummary, cube_mesh, read_off, summarize, uv_sphere
from .studies import LADDER_HEADER, ORACLE_HA, ORACLE_KA, convergence_study, oracle_compare

SCHEMA_VERSION = 1
MANIFEST_FORMAT = "smallscat-manifest"

DEFAULT_TOLERANCES = {
    "resonance": 1e-8,     # |1 + C/(h|S|)| below this is a resonance
    "residual": 1e-10,     # relative residual of direct solves
    "iteration": 1e-12,    # relative max-norm update that stops the iteration
    "regime": 0.1,         # ka or a/d above this raises a regime warning
    "design_imag": 1e-10,  # |Im(Ct/H + Ct)| / |Ct| allowed by design validation
    "oracle_rel": 0.05,    # relative error allowed in oracle-compare
}

COMMANDS = ("capacitance", "solve-discrete", "solve-continuum", "design", "validate",
            "oracle-compare", "convergence-study")


class UsageError(Exception):
    def __init__(self, message, pointer=""):
        super().__init__(message)
        self.pointer = pointer


def load_schema() -> dict:
    text = resources.files("smallscat").joinpath(f"schema/config-v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path) if path else ""


def validate_config(config: dict) -> None:
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise UsageError(err.message, _pointer(err.absolute_path))


def load_config(path):
    """Return ``(config, base_dir, manifest_or_None)``.

    A manifest written by a previous run is accepted in place of a config;
    its embedded config and seed are reused.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise UsageError("config must be a JSON object")
    if payload.get("format") == MANIFEST_FORMAT:
        return payload["config"], Path(payload["config_dir"]), payload
    return payload, path.resolve().parent, None


def parse_tolerances(config: dict, overrides) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(config.get("tolerances", {}))
    for item in overrides or ():
        name, sep, value = item.partition("=")
        if not sep or name not in DEFAULT_TOLERANCES:
            raise UsageError(f"bad --tolerance {item!r}; names: {', '.join(DEFAULT_TOLERANCES)}")
        try:
            tol[name] = float(value)
        except ValueError:
            raise UsageError(f"bad --tolerance value {value!r}") from None
        if not tol[name] > 0:
            raise UsageError(f"tolerance {name} must be positive")
    return tol


def config_hash(command: str, config: dict, seed: int) -> str:
    canon = json.dumps({"command": command, "config": config, "seed": seed}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# -- builders -------------------------------------------------------------------


def _resolve(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _require(config, key):
    if key not in config:
        raise UsageError(f"missing required key {key!r} for this command", _pointer([key]))
    return config[key]


def build_shape(config: dict, base: Path) -> ShapeSummary:
    spec = _require(config, "shape")
    kind = spec["type"]
    if kind == "sphere":
        if "refinement" in spec:
            return summarize(uv_sphere(spec["radius"], spec["refinement"]))
        return ShapeSummary.sphere(spec["radius"])
    if kind == "cube":
        return summarize(cube_mesh(spec["side"], spec.get("refinement", 4)))
    if kind == "mesh":
        mesh = read_off(_resolve(base, spec["path"]))
        if "scale" in spec:
            mesh = mesh.scaled(spec["scale"])
        return summarize(mesh.validate())
    J = spec.get("J", 4 * np.pi * spec["area"] ** 2 / spec["C"])
    return ShapeSummary(spec["area"], J, spec["C"], spec["diameter"])


def _gaussian(spec, points):
    c = np.asarray(spec["center"], float)
    r2 = np.sum((points - c) ** 2, axis=1)
    return parse_complex(spec["base"]) + parse_complex(spec["amplitude"]) * np.exp(-r2 / spec["width"] ** 2)


def build_background(config: dict, base: Path) -> PotentialGrid | None:
    spec = config.get("background", {"type": "free-space"})
    if spec["type"] == "free-space":
        return None
    k = _require(config, "k")
    if spec["type"] == "file":
        grid = read_grid(_resolve(base, spec["path"]))
        if not np.isclose(grid.k, k, rtol=1e-12):
            raise UsageError(f"grid file k = {grid.k} differs from config k = {k}", "/background/path")
        return grid
    given = [key for key in ("q0", "n0", "q0_gaussian") if key in spec]
    if len(given) > 1:
        raise UsageError("give at most one of q0, n0, q0_gaussian", "/background")
    if "n0" in spec:
        q0 = k**2 * (1 - parse_complex(spec["n0"]))
    elif "q0_gaussian" in spec:
        def q0(pts):
            return _gaussian(spec["q0_gaussian"], pts)
    else:
        q0 = parse_complex(spec.get("q0", 0.0))
    return PotentialGrid.box(spec["lower"], spec["upper"], spec["spacing"], k, q0=q0)


def build_grid(config: dict, base: Path) -> PotentialGrid:
    """Computational grid: the background's own, else the ``grid`` box with q0 = 0."""
    background = build_background(config, base)
    if background is not None:
        return background
    box = _require(config, "grid")
    return PotentialGrid.box(box["lower"], box["upper"], box["spacing"], _require(config, "k"))


def _read_aux_grid(path, k):
    header, values = read_field(path)
    grid = PotentialGrid(header["lower"], float(header["spacing"]), np.zeros(values.shape, complex), k,
                         max_kh=np.inf)
    return header, grid, values


def build_particles(config: dict, base: Path, shape, k, background, seed: int, tol: dict):
    spec = _require(config, "particles")
    mode = spec["mode"]
    density = None
    if mode == "explicit":
        if "centers" not in spec:
            raise UsageError("explicit mode needs centers", "/particles")
        centers = np.asarray(spec["centers"], float).reshape(-1, 3)
    else:
        centers = None
        dens = spec.get("density")
        if dens is None:
            raise UsageError(f"{mode} mode needs a density", "/particles")
        if isinstance(dens, dict):
            _, grid, values = _read_aux_grid(_resolve(base, dens["path"]), k)
            density = DensityField(grid, values.real)
        else:
            box = spec.get("grid")
            if box is None:
                raise UsageError("a constant density needs particles.grid", "/particles")
            grid = PotentialGrid.box(box["lower"], box["upper"], box["spacing"], k, max_kh=np.inf)
            density = DensityField(grid, float(dens))
    h_spec = spec.get("h")
    if h_spec is None:
        raise UsageError("particles need an impedance h", "/particles")
    if isinstance(h_spec, dict):
        _, grid, values = _read_aux_grid(_resolve(base, h_spec["path"]), k)
        h = ImpedanceField(grid, values)
    elif isinstance(h_spec, list) and h_spec and not isinstance(h_spec[0], (int, float)):
        if mode != "explicit":
            raise UsageError("per-particle h lists need explicit mode", "/particles/h")
        h = np.array([parse_complex(v) for v in h_spec])
    else:
        h = parse_complex(h_spec)
    placement = PlacementSpec(mode, density=density, centers=centers,
                              min_distance=float(spec.get("min_distance", 0.0)), seed=seed)
    if isinstance(h, np.ndarray):
        if len(h) != len(centers):
            raise UsageError(f"{len(h)} impedances for {len(centers)} centers", "/particles/h")
        cfg = ParticleConfiguration(centers, h, shape, k, background, resonance_eps=tol["resonance"])
        return cfg, None
    return place_particles(placement, shape, k, h, background, resonance_eps=tol["resonance"])


def _alpha(config):
    return np.asarray(config.get("incident", {}).get("alpha", [0.0, 0.0, 1.0]), float)


def _directions(config, alpha):
    return [np.asarray(b, float) for b in config.get("outputs", {}).get("directions", [alpha])]


def _amplitude_rows(directions, amplitude):
    rows = []
    for beta in directions:
        A = amplitude(beta)
        rows.append([beta[0], beta[1], beta[2], A.real, A.imag, abs(A) ** 2])
    return rows


AMPLITUDE_HEADER = ["beta_x", "beta_y", "beta_z", "re_A", "im_A", "abs_A2"]


# -- commands -------------------------------------------------------------------
# Each command writes into ``run`` and returns (manifest extras, passed).


def cmd_capacitance(config, base, run, ctx):
    shape = build_shape(config, base)
    record = shape.to_json()
    run.json("shape.json", record)
    return {"shape": record}, True


def cmd_solve_discrete(config, base, run, ctx):
    tol = ctx["tolerances"]
    k = _require(config, "k")
    shape = build_shape(config, base)
    background = build_background(config, base)
    cfg, placement = build_particles(config, base, shape, k, background, ctx["seed"], tol)
    alpha = _alpha(config)
    extras = {"M": cfg.M}
    if placement is not None:
        extras["placement"] = placement.to_json()
    run.csv("particles.csv", ["m", "x", "y", "z", "re_h", "im_h"],
            [[m, *cfg.centers[m], cfg.h[m].real, cfg.h[m].imag] for m in range(cfg.M)])
    if cfg.M:
        extras["regime"] = compute_regime(cfg, tol["regime"]).to_json()
    system = assemble_system(cfg, alpha)
    r = check_dominance(system)
    extras["dominance_ratio"] = r
    solver = config.get("solver", {})
    iterative = ctx["force_iteration"] or solver.get("method") == "iterative"
    if iterative:
        Q, trace = solve_iterative(system, n_max=solver.get("n_max", 1000), tol=tol["iteration"],
                                   force=ctx["force_iteration"])
        run.csv("iteration.csv", ["step", "update_max_norm"],
                [[i + 1, s] for i, s in enumerate(trace.steps)])
        extras["iterations"] = trace.iterations
    else:
        Q = solve_direct(system, tol["residual"])
    extras["solver"] = "iterative" if iterative else "direct"
    extras["residuals"] = {"charge_system": Q.residual}
    run.csv("charges.csv", ["m", "re_Q", "im_Q"], [[m, q.real, q.imag] for m, q in enumerate(Q.Q)])
    run.csv("amplitude.csv", AMPLITUDE_HEADER,
            _amplitude_rows(_directions(config, alpha), lambda b: discrete_amplitude(cfg, Q, b)))
    probes = config.get("outputs", {}).get("probes")
    if probes:
        P = np.asarray(probes, float)
        U = total_field(cfg, Q, P)
        run.csv("field.csv", ["x", "y", "z", "re_U", "im_U"],
                [[*p, u.real, u.imag] for p, u in zip(P, U)])
    return extras, True


def _ctilde(config, base, grid, tol):
    spec = _require(config, "ctilde")
    if isinstance(spec, dict) and "path" in spec:
        header, values = read_field(_resolve(base, spec["path"]))
        if tuple(header["shape"]) != grid.shape:
            raise UsageError("Ct field shape differs from the grid", "/ctilde/path")
        return CtildeField(grid, values)
    if isinstance(spec, dict):
        shape = build_shape(config, base)
        return ctilde_from_density(DensityField(grid, spec["density"]),
                                   ImpedanceField(grid, parse_complex(spec["h"])), shape, tol["resonance"])
    return CtildeField(grid, parse_complex(spec))


def cmd_solve_continuum(config, base, run, ctx):
    grid = build_grid(config, base)
    ct = _ctilde(config, base, grid, ctx["tolerances"])
    alpha = _alpha(config)
    route = config.get("continuum", {}).get("route", "potential")
    U_e = solve_effective_field(grid, ct, alpha, route=route)
    combined = grid.with_potential(grid.q0 + ct.values)
    res = residual_norm(combined, U_e.values, plane_wave(grid.centers, alpha, grid.k))
    run.field("effective_field.json", grid, U_e.values, "U_e")
    run.csv("amplitude.csv", AMPLITUDE_HEADER,
            _amplitude_rows(_directions(config, alpha), lambda b: continuum_amplitude(grid, ct, U_e, b, alpha)))
    return {"route": route, "grid_shape": list(grid.shape), "residuals": {"effective_field": res}}, True


def _n_desired(config, base, grid):
    spec = config["design"]["n_desired"]
    if spec == "background":
        return grid.n0
    if isinstance(spec, dict) and "path" in spec:
        header, values = read_field(_resolve(base, spec["path"]))
        if tuple(header["shape"]) != grid.shape:
            raise UsageError("target shape differs from the grid", "/design/n_desired/path")
        return values
    if isinstance(spec, dict):
        return _gaussian(spec["gaussian"], grid.centers).reshape(grid.shape)
    return parse_complex(spec)


def cmd_design(config, base, run, ctx):
    tol = ctx["tolerances"]
    dspec = _require(config, "design")
    grid = build_grid(config, base)
    shape = build_shape(config, base)
    target = DesignTarget(_n_desired(config, base, grid), grid, shape)
    kw = {"root": dspec.get("root", "larger")}
    if "H2" in dspec:
        kw["H2"] = dspec["H2"]
    if "real_density" in dspec:
        kw["real_density"] = dspec["real_density"]
    report = roundtrip_design(target, dspec.get("kappa", 0.5), **kw)
    validation = validate_design(report.recipe, target, tol["design_imag"])
    run.field("N.json", grid, report.recipe.N.values, "N")
    run.field("h.json", grid, report.recipe.h.values, "h")
    summary = {"max_rel_ctilde_error": report.max_rel_error, "max_n_error": report.max_n_error,
               "H2_policy": {"kappa": dspec.get("kappa", 0.5)} if "H2" not in dspec else {"H2": dspec["H2"]},
               "validation": validation.to_json()}
    run.json("validation.json", summary)
    return {"validation_passed": validation.passed,
            "residuals": {"ctilde_roundtrip": report.max_rel_error}}, validation.passed


def cmd_validate(config, base, run, ctx):
    tol = ctx["tolerances"]
    checks = {}
    background = build_background(config, base)
    if background is not None:
        checks["background_uniqueness"] = validate_uniqueness_background(background).to_json()
    extras = {}
    if "particles" in config:
        k = _require(config, "k")
        shape = build_shape(config, base)
        cfg, _ = build_particles(config, base, shape, k, background, ctx["seed"], tol)
        bad = np.flatnonzero(np.asarray(cfg.h).imag > 0)
        checks["particle_impedance"] = {"passed": bad.size == 0, "violations": bad.tolist()}
        if cfg.M:
            reg = compute_regime(cfg, tol["regime"])
            checks["regime"] = {"passed": not (reg.ka_warning or reg.a_over_d_warning), **reg.to_json()}
            system = assemble_system(cfg, _alpha(config))
            r = check_dominance(system)
            checks["dominance"] = {"passed": r < 1.0, "ratio": r}
            extras["regime"] = reg.to_json()
            extras["dominance_ratio"] = r
    passed = all(c["passed"] for c in checks.values())
    run.json("validation.json", {"passed": passed, "checks": checks})
    extras["validation_passed"] = passed
    return extras, passed


def cmd_oracle_compare(config, base, run, ctx):
    spec = config.get("oracle", {})
    rows = oracle_compare(spec.get("ka", ORACLE_KA), spec.get("ha", ORACLE_HA), spec.get("k", 1.0))
    run.csv("oracle_compare.csv",
            ["ka", "ha", "beta_x", "beta_y", "beta_z", "re_A_discrete", "im_A_discrete",
             "re_A_oracle", "im_A_oracle", "rel_err"],
            [[r["ka"], r["ha"], *r["beta"], r["A_discrete"].real, r["A_discrete"].imag,
              r["A_oracle"].real, r["A_oracle"].imag, r["rel_err"]] for r in rows])
    worst = max(r["rel_err"] for r in rows)
    passed = worst <= ctx["tolerances"]["oracle_rel"]
    return {"max_rel_err": worst}, passed


def cmd_convergence_study(config, base, run, ctx):
    spec = config.get("study", {})
    rungs = convergence_study(levels=tuple(spec.get("levels", (5, 10, 15))),
                              ctilde=spec.get("ctilde", 10.0), ha=spec.get("ha", 0.1),
                              k=spec.get("k", 3.0), continuum_cells=spec.get("continuum_cells", 20),
                              coarse_cells=spec.get("coarse_cells", 5))
    run.csv("convergence.csv", LADDER_HEADER, [r.to_row() for r in rungs])
    gaps = [r.gap for r in rungs]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    within = rungs[-1].gap <= rungs[-1].error_scale
    return {"strictly_decreasing": decreasing, "final_gap_within_error_scale": within}, decreasing and within


HANDLERS = {
    "capacitance": cmd_capacitance,
    "solve-discrete": cmd_solve_discrete,
    "solve-continuum": cmd_solve_continuum,
    "design": cmd_design,
    "validate": cmd_validate,
    "oracle-compare": cmd_oracle_compare,
    "convergence-study": cmd_convergence_study,
}


# -- run directory ----------------------------------------------------------------


class RunDir:
    """Collects artifacts; every write is atomic and recorded."""

    def __init__(self, path: Path):
        self.path = path
        self.outputs: list[str] = []

    def _track(self, *paths):
        for p in paths:
            self.outputs.append(Path(p).relative_to(self.path).as_posix())

    def json(self, name, payload):
        self._track(write_json(self.path / name, payload))

    def csv(self, name, header, rows):
        self._track(write_csv(self.path / name, header, rows))

    def field(self, name, grid, values, field):
        self._track(*write_field(self.path / name, grid, values, field))

    def text(self, name, text):
        self._track(atomic_write_text(self.path / name, text))


def _make_run_dir(out: Path, digest: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    path = out / f"{stamp}-{digest[:12]}"
    n = 1
    while path.exists():
        path = out / f"{stamp}-{digest[:12]}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def run(command: str, config_path, out="runs", seed=None, force_iteration=False,
        tolerances=()) -> tuple[int, Path | None]:
    """Execute one command; returns ``(exit_status, run_directory)``."""
    config, base, manifest = load_config(config_path)
    if manifest is not None:
        if manifest["command"] != command:
            raise UsageError(f"manifest was written by {manifest['command']!r}, not {command!r}", "/command")
        if seed is None:
            seed = manifest["seed"]
        force_iteration = force_iteration or manifest.get("force_iteration", False)
        tolerances = list(tolerances) + [f"{k}={v}" for k, v in manifest.get("tolerance_overrides", {}).items()]
    validate_config(config)
    if seed is None:
        seed = int(config.get("seed", 0))
    tol = parse_tolerances(config, tolerances)
    overrides = {k: v for k, v in tol.items() if v != DEFAULT_TOLERANCES[k]}
    digest = config_hash(command, config, seed)
    run_dir = RunDir(_make_run_dir(Path(out), digest))
    ctx = {"seed": seed, "tolerances": tol, "force_iteration": force_iteration}
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            extras, passed = HANDLERS[command](config, base, run_dir, ctx)
        except (SmallScatError, OverflowError) as exc:
            extras, passed = {"error": f"{type(exc).__name__}: {exc}"}, False
            failure = exc
        else:
            failure = None
    elapsed = time.perf_counter() - t0
    run_dir.text("timings.txt", f"{command} {elapsed:.3f} s\n")
    record = {
        "format": MANIFEST_FORMAT,
        "manifest_version": 1,
        "command": command,
        "config": config,
        "config_dir": str(base),
        "config_hash": digest,
        "seed": seed,
        "force_iteration": force_iteration,
        "tolerances": tol,
        "tolerance_overrides": overrides,
        "versions": {"smallscat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": ".".join(map(str, sys.version_info[:3]))},
        "warnings": sorted({f"{w.category.__name__}: {w.message}" for w in caught}),
        "passed": passed,
        **extras,
    }
    record["outputs"] = sorted(run_dir.outputs + ["manifest.json"])
    write_json(run_dir.path / "manifest.json", record)
    if failure is not None:
        failure.run_dir = run_dir.path
        raise failure
    return (0 if passed else 3), run_dir.path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smallscat",
                                description="Scattering by many small impedance particles.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config or a previous manifest.json")
        s.add_argument("--seed", type=int, default=None, help="random seed (default: config seed or 0)")
        s.add_argument("--out", default="runs", help="parent directory for run folders")
        s.add_argument("--force-iteration", action="store_true",
                       help="iterate even when the dominance ratio is >= 1")
        s.add_argument("--tolerance", action="append", default=[], metavar="NAME=VALUE",
                       help=f"override a tolerance ({', '.join(DEFAULT_TOLERANCES)})")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        status, path = run(args.command, args.config, args.out, args.seed, args.force_iteration,
                           args.tolerance)
    except UsageError as exc:
        where = f" at {exc.pointer}" if exc.pointer else ""
        print(f"smallscat: config error{where}: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"smallscat: config error: {exc}", file=sys.stderr)
        return 2
    except (SmallScatError, OverflowError) as exc:
        print(f"smallscat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    if status == 3:
        print("smallscat: validation failed; see the report in the run directory", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
