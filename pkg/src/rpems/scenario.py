"""Scenario definition: aperture grid, illumination, observation region and
desired footprints, plus the mapping between ground (global) coordinates and
the skin-centered spherical frame.

Global frame: the skin hangs on a wall at height ``d`` above the ground plane
``z~ = 0``; ``x~`` points away from the wall into the served area, ``y~`` runs
along the wall.  The skin's local Cartesian frame has its normal along ``x~``,
local ``x`` along ``y~`` and local ``y`` along the vertical (``z~ - d``).
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import shapely
from scipy import constants

SCHEMA_VERSION = 1

C0 = constants.c
MU0 = constants.mu_0
EPS0 = constants.epsilon_0
ETA0 = math.sqrt(MU0 / EPS0)


class ScenarioError(ValueError):
    """Raised for malformed scenario files or violated invariants."""


# Default solver settings; every block can be overridden per scenario.
DEFAULT_SOLVER: dict[str, dict[str, Any]] = {
    "atom": {"design": True, "budget": 5000, "rel_bounds": 0.2},
    "twin": {"kind": "kriging", "samples": 200, "rel_box": 0.05},
    "operator": {"memory_budget_mb": 1024, "randomized_rank": 600},
    "qipm": {
        "max_iters": 100,
        "conv_threshold": 1e-4,
        "svd_rel_threshold": 1e-3,
        "pairing": "state",
    },
    "ga": {
        "population": 20,
        "max_iters": 10000,
        "fitness_threshold": 1e-3,
        "crossover_rate": 0.9,
        "mutation_rate": None,
        "elitism": 1,
        "init": "random",
        "warm_start": False,
    },
}


# --------------------------------------------------------------------------
# incident wave


@dataclass(frozen=True)
class IncidentWave:
    """Plane wave illuminating the skin, described in the skin's local frame.

    ``theta_inc``/``phi_inc`` are the spherical angles [rad] of the direction
    the wave comes from; the local surface normal is ``+z``.
    """

    theta_inc: float
    phi_inc: float
    e_perp: complex
    e_par: complex
    frequency: float

    @property
    def k0(self) -> float:
        return 2.0 * math.pi * self.frequency / C0

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency

    @property
    def eta0(self) -> float:
        return ETA0

    @property
    def eps0(self) -> float:
        return EPS0

    @property
    def mu0(self) -> float:
        return MU0

    @property
    def normal(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def _direction(self) -> np.ndarray:
        st, ct = math.sin(self.theta_inc), math.cos(self.theta_inc)
        sp, cp = math.sin(self.phi_inc), math.cos(self.phi_inc)
        return np.array([st * cp, st * sp, ct])

    @property
    def k_inc(self) -> np.ndarray:
        """Incident wave vector (travelling toward the skin, ``-z``)."""
        return -self.k0 * self._direction()

    @property
    def k_ref(self) -> np.ndarray:
        """Specular reflection of ``k_inc`` (normal component flipped)."""
        k = self.k_inc.copy()
        k[2] = -k[2]
        return k

    @property
    def e_perp_hat(self) -> np.ndarray:
        """TE unit vector, normal to the plane of incidence."""
        kh = self.k_inc / self.k0
        v = np.cross(kh, self.normal)
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            # normal incidence: keep the limit of the oblique formula
            return np.array([-math.sin(self.phi_inc), math.cos(self.phi_inc), 0.0])
        return v / nv

    @property
    def e_par_hat(self) -> np.ndarray:
        """TM unit vector of the incident wave, ``k_inc_hat x e_perp_hat``."""
        return np.cross(self.k_inc / self.k0, self.e_perp_hat)

    @property
    def e_par_ref_hat(self) -> np.ndarray:
        """TM unit vector of the reflected wave.

        Chosen so that its tangential part equals that of ``e_par_hat``; a
        reflection coefficient of -1 then cancels the tangential field.
        """
        return -np.cross(self.k_ref / self.k0, self.e_perp_hat)

    @property
    def e_inc_vector(self) -> np.ndarray:
        """Complex incident field vector at the local origin."""
        return self.e_perp * self.e_perp_hat + self.e_par * self.e_par_hat

    def scaled(self, factor: complex) -> "IncidentWave":
        return IncidentWave(
            self.theta_inc, self.phi_inc, self.e_perp * factor, self.e_par * factor, self.frequency
        )


# --------------------------------------------------------------------------
# observation grid and footprints


@dataclass(frozen=True)
class ObservationGrid:
    """Regular sample grid on the ground plane (``z~ = 0``).

    Samples include both ends of each range; every sample stands for a
    ``dx * dy`` patch (midpoint rule).
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) < 2:
            raise ScenarioError("obs.nx must be ≥ 2")
        if int(self.ny) < 2:
            raise ScenarioError("obs.ny must be ≥ 2")
        if not self.x_range[1] > self.x_range[0]:
            raise ScenarioError("obs.x_range must be non-degenerate (x_max > x_min)")
        if not self.y_range[1] > self.y_range[0]:
            raise ScenarioError("obs.y_range must be non-degenerate (y_max > y_min)")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.ny)

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape of sampled maps: ``(ny, nx)``."""
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.xs, self.ys)

    def points(self) -> np.ndarray:
        """Global sample points, shape ``(ny*nx, 3)``, row-major over y then x."""
        X, Y = self.mesh()
        return np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])


def _as_polygon(vertices) -> shapely.Polygon:
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ScenarioError("coverage polygon needs at least 3 (x, y) vertices")
    ring = shapely.LinearRing(pts)
    if not ring.is_simple:
        raise ScenarioError("coverage polygon is self-intersecting")
    poly = shapely.Polygon(pts)
    if poly.area <= 0.0:
        raise ScenarioError("coverage polygon has zero area")
    return poly


@dataclass(frozen=True, eq=False)
class DesiredFootprint:
    """Two-level target footprint sampled on an observation grid."""

    coverage_regions: tuple[np.ndarray, ...]
    level_in_db: float
    level_out_db: float
    mask: np.ndarray  # bool, shape (ny, nx); True inside coverage

    @property
    def level_db(self) -> np.ndarray:
        return np.where(self.mask, self.level_in_db, self.level_out_db)

    def power(self, reference: float) -> np.ndarray:
        """Linear desired power map relative to ``reference``."""
        return reference * 10.0 ** (self.level_db / 10.0)


def build_desired_footprint(
    regions: Sequence, level_in_db: float, level_out_db: float, grid: ObservationGrid
) -> DesiredFootprint:
    """Sample coverage polygons onto ``grid``; boundary points count as inside."""
    if not level_in_db > level_out_db:
        raise ScenarioError("level_in_db must be > level_out_db")
    polys = [_as_polygon(r) for r in regions]
    X, Y = grid.mesh()
    mask = np.zeros(grid.shape, dtype=bool)
    if polys:
        pts = shapely.points(X.ravel(), Y.ravel())
        for poly in polys:
            mask |= shapely.covers(poly, pts).reshape(grid.shape)
    mask.setflags(write=False)
    regs = tuple(np.asarray(r, dtype=float) for r in regions)
    return DesiredFootprint(regs, float(level_in_db), float(level_out_db), mask)


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    m_cells: int
    n_cells: int
    cell_dx: float
    cell_dy: float
    height_d: float
    frequency_f0: float
    incident: IncidentWave
    obs: ObservationGrid
    footprints: tuple[DesiredFootprint, ...]
    rng_seed: int = 0
    solver: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_SOLVER))
    name: str = "scenario"

    def __post_init__(self):
        _check(self.m_cells >= 1, "m_cells must be ≥ 1")
        _check(self.n_cells >= 1, "n_cells must be ≥ 1")
        _check(self.cell_dx > 0, "cell_dx must be > 0")
        _check(self.cell_dy > 0, "cell_dy must be > 0")
        _check(self.height_d > 0, "height_d must be > 0")
        _check(self.frequency_f0 > 0, "frequency_f0 must be > 0")
        _check(len(self.footprints) >= 1, "footprints must be non-empty")
        _check(self.obs.x_range[0] > 0, "obs.x_range must lie in the half-space x > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m_cells, self.n_cells)

    @property
    def n_steps(self) -> int:
        return len(self.footprints)

    @property
    def cell_x(self) -> np.ndarray:
        m = np.arange(1, self.m_cells + 1)
        return (m - (self.m_cells + 1) / 2.0) * self.cell_dx

    @property
    def cell_y(self) -> np.ndarray:
        n = np.arange(1, self.n_cells + 1)
        return (n - (self.n_cells + 1) / 2.0) * self.cell_dy

    def with_updates(self, **kw) -> "ScenarioSpec":
        from dataclasses import replace

        return replace(self, **kw)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def cell_center(m: int, n: int, spec: ScenarioSpec) -> tuple[float, float]:
    """Local center of cell ``(m, n)`` (1-based indices)."""
    if not (1 <= m <= spec.m_cells and 1 <= n <= spec.n_cells):
        raise IndexError(f"cell ({m}, {n}) outside 1..{spec.m_cells} x 1..{spec.n_cells}")
    x = (m - (spec.m_cells + 1) / 2.0) * spec.cell_dx
    y = (n - (spec.n_cells + 1) / 2.0) * spec.cell_dy
    return x, y


# --------------------------------------------------------------------------
# coordinates


def global_to_local(point, d: float):
    """Map global ``(x~, y~, z~)`` to skin-centered ``(r, theta, phi)``.

    Works on a single point or an ``(..., 3)`` array.  ``theta`` is measured
    from the skin normal (``x~``); ``phi`` is the azimuth in the skin plane,
    measured from ``y~`` toward the vertical.
    """
    p = np.asarray(point, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2] - d
    if np.any(x <= 0):
        raise ValueError("point outside the observation half-space (x~ must be > 0)")
    rho = np.hypot(y, z)
    r = np.sqrt(x * x + rho * rho)
    if np.any(r == 0):
        raise ValueError("point coincides with the skin center")
    theta = np.arctan2(rho, x)
    phi = np.arctan2(z, y)
    if p.ndim == 1:
        return float(r), float(theta), float(phi)
    return r, theta, phi


def local_to_global(r, theta, phi, d: float) -> np.ndarray:
    """Inverse of :func:`global_to_local`."""
    r, theta, phi = np.broadcast_arrays(
        np.asarray(r, float), np.asarray(theta, float), np.asarray(phi, float)
    )
    st = np.sin(theta)
    return np.stack([r * np.cos(theta), r * st * np.cos(phi), d + r * st * np.sin(phi)], axis=-1)


def direction_cosines(theta, phi):
    """``(u, v)`` = projections of the unit direction on the local x and y axes."""
    st = np.sin(theta)
    return st * np.cos(phi), st * np.sin(phi)


# --------------------------------------------------------------------------
# loading


def _complex(value, name: str) -> complex:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ScenarioError(f"{name} must be a number or a [re, im] pair")


def _req(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise ScenarioError(f"missing required field '{where}{key}'")
    return doc[key]


def _num(doc: dict, key: str, kind=float, where: str = ""):
    v = _req(doc, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}{key} must be a number")
    if kind is int:
        if float(v) != int(v):
            raise ScenarioError(f"{where}{key} must be an integer")
        return int(v)
    return float(v)


def _merge_solver(user: dict | None) -> dict:
    out = copy.deepcopy(DEFAULT_SOLVER)
    for block, values in (user or {}).items():
        if block not in out:
            raise ScenarioError(f"unknown solver block 'solver.{block}'")
        if not isinstance(values, dict):
            raise ScenarioError(f"solver.{block} must be an object")
        for k, v in values.items():
            if k not in out[block]:
                raise ScenarioError(f"unknown field 'solver.{block}.{k}'")
            out[block][k] = v
    return out


def scenario_from_dict(doc: dict, name: str = "scenario") -> ScenarioSpec:
    """Build and validate a :class:`ScenarioSpec` from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version {version} not supported (expected {SCHEMA_VERSION})")

    m = _num(doc, "m_cells", int)
    n = _num(doc, "n_cells", int)
    _check(m >= 1, "m_cells must be ≥ 1")
    _check(n >= 1, "n_cells must be ≥ 1")
    f0 = _num(doc, "frequency_f0")
    _check(f0 > 0, "frequency_f0 must be > 0")

    inc = _req(doc, "incident")
    if not isinstance(inc, dict):
        raise ScenarioError("incident must be an object")
    wave = IncidentWave(
        math.radians(_num(inc, "theta_inc", where="incident.")),
        math.radians(_num(inc, "phi_inc", where="incident.")),
        _complex(_req(inc, "e_perp", "incident."), "incident.e_perp"),
        _complex(_req(inc, "e_par", "incident."), "incident.e_par"),
        f0,
    )
    _check(0.0 <= wave.theta_inc < math.pi / 2, "incident.theta_inc must be in [0, 90) degrees")

    ob = _req(doc, "obs")
    try:
        xr = tuple(float(v) for v in _req(ob, "x_range", "obs."))
        yr = tuple(float(v) for v in _req(ob, "y_range", "obs."))
    except TypeError as exc:
        raise ScenarioError("obs.x_range / obs.y_range must be [min, max] pairs") from exc
    if len(xr) != 2 or len(yr) != 2:
        raise ScenarioError("obs.x_range / obs.y_range must be [min, max] pairs")
    grid = ObservationGrid(xr, yr, _num(ob, "nx", int, "obs."), _num(ob, "ny", int, "obs."))

    fps_doc = _req(doc, "footprints")
    if not isinstance(fps_doc, list) or not fps_doc:
        raise ScenarioError("footprints must be non-empty")
    fps = []
    for i, fp in enumerate(fps_doc):
        where = f"footprints[{i}]."
        regions = _req(fp, "coverage_regions", where)
        try:
            fps.append(
                build_desired_footprint(
                    regions,
                    _num(fp, "level_in_db", where=where),
                    _num(fp, "level_out_db", where=where),
                    grid,
                )
            )
        except ScenarioError as exc:
            raise ScenarioError(f"{where[:-1]}: {exc}") from None

    seed = doc.get("rng_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError("rng_seed must be a non-negative integer")

    return ScenarioSpec(
        m_cells=m,
        n_cells=n,
        cell_dx=_num(doc, "cell_dx"),
        cell_dy=_num(doc, "cell_dy"),
        height_d=_num(doc, "height_d"),
        frequency_f0=f0,
        incident=wave,
        obs=grid,
        footprints=tuple(fps),
        rng_seed=seed,
        solver=_merge_solver(doc.get("solver")),
        name=str(doc.get("name", name)),
    )


def load_scenario(path) -> ScenarioSpec:
    """Read a JSON scenario file and return a validated :class:`ScenarioSpec`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    return scenario_from_dict(doc, name=path.stem)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    """Serialize a spec back to the file schema (angles in degrees)."""
    w = spec.incident
    return {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "m_cells": spec.m_cells,
        "n_cells": spec.n_cells,
        "cell_dx": spec.cell_dx,
        "cell_dy": spec.cell_dy,
        "height_d": spec.height_d,
        "frequency_f0": spec.frequency_f0,
        "rng_seed": spec.rng_seed,
        "incident": {
            "theta_inc": math.degrees(w.theta_inc),
            "phi_inc": math.degrees(w.phi_inc),
            "e_perp": [w.e_perp.real, w.e_perp.imag],
            "e_par": [w.e_par.real, w.e_par.imag],
        },
        "obs": {
            "x_range": list(spec.obs.x_range),
            "y_range": list(spec.obs.y_range),
            "nx": spec.obs.nx,
            "ny": spec.obs.ny,
        },
        "footprints": [
            {
                "coverage_regions": [r.tolist() for r in fp.coverage_regions],
                "level_in_db": fp.level_in_db,
                "level_out_db": fp.level_out_db,
            }
            for fp in spec.footprints
        ],
        "solver": copy.deepcopy(spec.solver),
    }


def square(center: tuple[float, float], side: float) -> list[list[float]]:
    """Axis-aligned square polygon."""
    cx, cy = center
    h = side / 2.0
    return [[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]]
