"""Forward chain: cell states -> surface-averaged fields -> equivalent surface
currents -> far field -> ground footprint, plus the discretized radiation
operator (with its SVD) and the coverage index.

Cell ordering: coefficient arrays are ``(M, N)``; flattened vectors use
row-major order, index ``m * N + n``.  Observation samples are flattened in
the row-major order of ``ObservationGrid.points``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .atom import ReflectionTensor, susceptibility_to_gamma
from .scenario import C0, ETA0, ObservationGrid, ScenarioSpec, direction_cosines, global_to_local


def _sinc(x):
    """``sin(x)/x`` with ``sinc(0) = 1``."""
    return np.sinc(np.asarray(x) / np.pi)


# --------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class SurfaceCurrent:
    """Per-cell complex current coefficients along one polarization."""

    coeffs: np.ndarray  # (M, N) complex
    polarization: np.ndarray  # (3,) complex unit vector

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 2:
            raise ValueError("current coefficients must be an (M, N) array")
        if not np.all(np.isfinite(c)):
            raise ValueError("current coefficients must be finite")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "polarization", np.asarray(self.polarization, dtype=complex))

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape

    def scaled(self, factor) -> "SurfaceCurrent":
        return SurfaceCurrent(self.coeffs * factor, self.polarization)


@dataclass(frozen=True, eq=False)
class FootprintField:
    """Complex field samples on the observation grid, shape ``(ny, nx)``."""

    field: np.ndarray
    grid: ObservationGrid

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.field) ** 2

    def db(self, reference: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.power / reference)


def check_states(states, spec: ScenarioSpec) -> np.ndarray:
    s = np.asarray(states)
    if s.shape != spec.shape:
        raise ValueError(f"state matrix shape {s.shape} != aperture {spec.shape}")
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("state matrix entries must be 0 or 1")
    return s.astype(np.int8)


# --------------------------------------------------------------------------
# averaged fields and cell currents


def cell_average_factors(wave, spec: ScenarioSpec) -> np.ndarray:
    """Cell average of the incident phase factor ``exp(-j k_inc . r)``.

    Returns ``(M, N)``; all ones at normal incidence.
    """
    kx, ky = wave.k_inc[0], wave.k_inc[1]
    wx = np.exp(-1j * kx * spec.cell_x) * _sinc(kx * spec.cell_dx / 2.0)
    wy = np.exp(-1j * ky * spec.cell_y) * _sinc(ky * spec.cell_dy / 2.0)
    return np.outer(wx, wy)


def _reflected_vector(gamma: ReflectionTensor, wave) -> np.ndarray:
    e_perp = gamma.gamma_pp * wave.e_perp + gamma.gamma_pl * wave.e_par
    e_par = gamma.gamma_lp * wave.e_perp + gamma.gamma_ll * wave.e_par
    return e_perp * wave.e_perp_hat + e_par * wave.e_par_ref_hat


def _unit_fields(gamma: ReflectionTensor, wave) -> tuple[np.ndarray, np.ndarray]:
    """Averaged fields for a unit incident phase factor."""
    e_inc = wave.e_inc_vector
    e_ref = _reflected_vector(gamma, wave)
    e = 0.5 * (e_inc + e_ref)
    h = (np.cross(wave.k_inc, e_inc) + np.cross(wave.k_ref, e_ref)) / (2.0 * ETA0 * wave.k0)
    return e, h


def averaged_fields(gamma: ReflectionTensor, wave, cell: tuple[int, int], spec: ScenarioSpec):
    """Surface-averaged ``(E, H)`` over cell ``(m, n)`` (1-based)."""
    m, n = cell
    if not (1 <= m <= spec.m_cells and 1 <= n <= spec.n_cells):
        raise IndexError(f"cell {cell} outside the aperture")
    w = cell_average_factors(wave, spec)[m - 1, n - 1]
    e, h = _unit_fields(gamma, wave)
    return w * e, w * h


def gstc_current(k, wave, e_avg=None, h_avg=None) -> np.ndarray:
    """Equivalent tangential current of a cell from its susceptibilities.

    ``J = Je_t - (nu x Jh) / eta0`` with ``Je = j w eps0 Ke E`` and
    ``Jh = j w mu0 Kh H``.  When the averaged fields are not given they are
    taken for a unit phase factor, with the reflection implied by ``k``.
    """
    if e_avg is None or h_avg is None:
        e_avg, h_avg = _unit_fields(susceptibility_to_gamma(k, wave), wave)
    je = 1j * wave.omega * wave.eps0 * k.ke * e_avg
    jh = 1j * wave.omega * wave.mu0 * k.kh * h_avg
    je_t = je.copy()
    je_t[2] = 0.0
    return je_t - np.cross(wave.normal, jh) / ETA0


def cell_response(twin, g, wave) -> tuple[np.ndarray, np.ndarray]:
    """Per-state current coefficients ``z[s]`` and the shared polarization.

    The polarization is the dominant right singular vector of the two
    per-state current vectors, phase-normalized so its largest entry is real
    and positive.
    """
    vecs = np.array([gstc_current(twin.susceptibility(g, s, wave), wave) for s in (0, 1)])
    _, _, vh = np.linalg.svd(vecs)
    pol = np.conj(vh[0])
    i = int(np.argmax(np.abs(pol)))
    pol = pol * np.exp(-1j * np.angle(pol[i]))
    z = vecs @ np.conj(pol)
    return z, pol


def states_to_current(states, twin, g, wave, spec: ScenarioSpec, response=None) -> SurfaceCurrent:
    """Current realized by an ON/OFF state matrix (one twin query per state).

    ``response`` can carry a precomputed ``cell_response(twin, g, wave)``.
    """
    s = check_states(states, spec)
    z, pol = cell_response(twin, g, wave) if response is None else response
    return SurfaceCurrent(cell_average_factors(wave, spec) * z[s], pol)


def uniform_current(value: complex, spec: ScenarioSpec, wave, polarization=None) -> SurfaceCurrent:
    pol = np.array([1.0, 0.0, 0.0]) if polarization is None else polarization
    return SurfaceCurrent(cell_average_factors(wave, spec) * value, pol)


# --------------------------------------------------------------------------
# radiation


def _prefactor(k0, r, u, v, dx, dy):
    return (1j * k0 / (4.0 * np.pi)) * np.exp(-1j * k0 * r) / r * dx * dy * _sinc(
        k0 * u * dx / 2.0
    ) * _sinc(k0 * v * dy / 2.0)


def radiate(current: SurfaceCurrent, directions, r, spec: ScenarioSpec, chunk: int = 256) -> np.ndarray:
    """Far-field samples (component along the current polarization).

    ``directions`` is a ``(K, 2)`` array of ``(theta, phi)`` and ``r`` a
    scalar or ``(K,)`` range.  Cells are summed explicitly (no separable
    factorization) so this doubles as the reference for the operator path.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    r = np.broadcast_to(np.asarray(r, dtype=float), (len(d),))
    if np.any(r <= 0):
        raise ValueError("range must be > 0")
    k0 = 2.0 * np.pi * spec.frequency_f0 / C0
    u, v = direction_cosines(d[:, 0], d[:, 1])
    X, Y = np.meshgrid(spec.cell_x, spec.cell_y, indexing="ij")
    xc, yc, c = X.ravel(), Y.ravel(), current.coeffs.ravel()
    out = np.empty(len(d), dtype=complex)
    for a in range(0, len(d), chunk):
        b = min(a + chunk, len(d))
        phase = np.exp(1j * k0 * (np.outer(u[a:b], xc) + np.outer(v[a:b], yc)))
        out[a:b] = phase @ c
    return out * _prefactor(k0, r, u, v, spec.cell_dx, spec.cell_dy)


def observation_geometry(spec: ScenarioSpec, grid: ObservationGrid | None = None):
    """``(r, u, v)`` of every observation sample, flattened."""
    grid = spec.obs if grid is None else grid
    r, theta, phi = global_to_local(grid.points(), spec.height_d)
    u, v = direction_cosines(theta, phi)
    return r, theta, phi, u, v


def footprint(current: SurfaceCurrent, spec: ScenarioSpec, grid: ObservationGrid | None = None) -> FootprintField:
    """Field on the ground grid, evaluated sample by sample."""
    grid = spec.obs if grid is None else grid
    r, theta, phi, _, _ = observation_geometry(spec, grid)
    e = radiate(current, np.column_stack([theta, phi]), r, spec)
    return FootprintField(e.reshape(grid.shape), grid)


class OperatorBudgetError(MemoryError):
    pass


class RadiationOperator:
    """Linear map from ``(M, N)`` cell coefficients to footprint samples.

    The kernel factors as ``pref[s] * ax[s, m] * by[s, n]``, so products
    cost ``O(M N P)`` without storing the dense matrix.  The truncated SVD
    is computed on first use by :meth:`decompose`.
    """

    def __init__(self, spec: ScenarioSpec, grid: ObservationGrid | None = None,
                 memory_budget_mb: float = 1024.0, randomized_rank: int = 600,
                 dense_limit: int = 10_000):
        self.grid = spec.obs if grid is None else grid
        self.shape = spec.shape
        self.memory_budget_mb = float(memory_budget_mb)
        self.randomized_rank = int(randomized_rank)
        self.dense_limit = int(dense_limit)
        k0 = 2.0 * np.pi * spec.frequency_f0 / C0
        r, _, _, u, v = observation_geometry(spec, self.grid)
        self.k0 = k0
        self.pref = _prefactor(k0, r, u, v, spec.cell_dx, spec.cell_dy)
        self.ax = np.exp(1j * k0 * np.outer(u, spec.cell_x))
        self.by = np.exp(1j * k0 * np.outer(v, spec.cell_y))
        self.method = None
        self.u_vecs = None
        self.sigma = None
        self.vh = None

    @property
    def n_samples(self) -> int:
        return len(self.pref)

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    def forward(self, coeffs) -> np.ndarray:
        """Field samples ``(P,)`` (or ``(K, P)`` for a batch of coefficient maps)."""
        c = np.asarray(coeffs)
        if c.ndim == 2:
            t = c @ self.by.T  # (M, P)
            return self.pref * np.einsum("mp,pm->p", t, self.ax)
        t = np.matmul(c, self.by.T)  # (K, M, P)
        return self.pref * np.einsum("kmp,pm->kp", t, self.ax)

    def adjoint(self, b) -> np.ndarray:
        """``A^H b`` reshaped to ``(M, N)`` (or ``(K, M, N)`` for ``(K, P)`` input)."""
        b = np.asarray(b)
        w = np.conj(self.pref) * b
        if b.ndim == 1:
            return (np.conj(self.ax) * w[:, None]).T @ np.conj(self.by)
        return np.einsum("pm,kp,pn->kmn", np.conj(self.ax), w, np.conj(self.by), optimize=True)

    def column(self, m: int, n: int) -> np.ndarray:
        """Samples radiated by a unit coefficient on cell ``(m, n)`` (0-based)."""
        return self.pref * self.ax[:, m] * self.by[:, n]

    def _mb(self, n_complex: float) -> float:
        return 16.0 * n_complex / 2**20

    def matrix(self) -> np.ndarray:
        """Dense ``(P, M*N)`` matrix."""
        need = self._mb(self.n_samples * self.n_cells)
        if need > self.memory_budget_mb:
            raise OperatorBudgetError(
                f"dense operator needs {need:.0f} MB, budget {self.memory_budget_mb:.0f} MB; "
                "reduce observation samples or aperture cells"
            )
        m, n = self.shape
        return (self.pref[:, None, None] * self.ax[:, :, None] * self.by[:, None, :]).reshape(
            self.n_samples, m * n
        )

    def gram(self) -> np.ndarray:
        """``A A^H`` from the separable factors."""
        gx = self.ax @ self.ax.conj().T
        gx *= self.by @ self.by.conj().T
        gx *= np.outer(self.pref, np.conj(self.pref))
        return gx

    def decompose(self) -> "RadiationOperator":
        """Compute and cache the SVD (left vectors and singular values)."""
        if self.method is not None:
            return self
        p, mn = self.n_samples, self.n_cells
        budget = self.memory_budget_mb
        if mn <= min(p, self.dense_limit):
            need = self._mb(3 * p * mn)
            if need > budget:
                raise OperatorBudgetError(
                    f"dense SVD needs {need:.0f} MB, budget {budget:.0f} MB; "
                    "reduce observation samples or aperture cells"
                )
            u, s, vh = np.linalg.svd(self.matrix(), full_matrices=False)
            self.method, self.u_vecs, self.sigma, self.vh = "dense", u, s, vh
        elif mn <= self.dense_limit:
            need = self._mb(3 * p * p)
            if need > budget:
                raise OperatorBudgetError(
                    f"Gram eigendecomposition needs {need:.0f} MB, budget {budget:.0f} MB; "
                    "reduce observation samples"
                )
            lam, u = np.linalg.eigh(self.gram())
            lam, u = lam[::-1], u[:, ::-1]
            self.method = "gram"
            self.sigma = np.sqrt(np.clip(lam, 0.0, None))
            self.u_vecs = np.ascontiguousarray(u)
        else:
            self._randomized()
        return self

    def _randomized(self, oversample: int = 10, chunk: int = 8):
        p, mn = self.n_samples, self.n_cells
        k = min(self.randomized_rank + oversample, p, mn)
        need = self._mb(3 * p * k + chunk * self.shape[0] * p)
        if need > self.memory_budget_mb:
            raise OperatorBudgetError(
                f"randomized SVD of rank {k} needs {need:.0f} MB, budget "
                f"{self.memory_budget_mb:.0f} MB; lower randomized_rank or observation samples"
            )
        rng = np.random.default_rng(0)
        m, n = self.shape
        y = np.empty((p, k), dtype=complex)
        for a in range(0, k, chunk):
            b = min(a + chunk, k)
            om = rng.standard_normal((b - a, m, n)) + 1j * rng.standard_normal((b - a, m, n))
            y[:, a:b] = self.forward(om).T
        q, _ = np.linalg.qr(y)
        # B^H = A^H Q; small SVD of the projected operator via its Gram
        bh = np.empty((k, k), dtype=complex)
        for a in range(0, k, chunk):
            b = min(a + chunk, k)
            cols = self.adjoint(q[:, a:b].T.copy())  # (c, M, N)
            bh[a:b] = self.forward(cols) @ np.conj(q)
        # bh[i, j] = q_j^H A A^H q_i
        lam, w = np.linalg.eigh(bh.T)
        lam, w = lam[::-1], w[:, ::-1]
        keep = min(self.randomized_rank, k)
        self.method = "randomized"
        self.sigma = np.sqrt(np.clip(lam[:keep], 0.0, None))
        self.u_vecs = q @ w[:, :keep]

    def retained(self, rel_threshold: float) -> int:
        self.decompose()
        if self.sigma[0] <= 0:
            return 0
        return int(np.count_nonzero(self.sigma >= rel_threshold * self.sigma[0]))

    def min_norm(self, b, rel_threshold: float = 1e-3) -> np.ndarray:
        """Minimum-norm coefficients reproducing ``b`` on the retained subspace."""
        k = self.retained(rel_threshold)
        if k == 0:
            raise np.linalg.LinAlgError("all singular values below the truncation cutoff")
        uk = self.u_vecs[:, :k]
        y = uk.conj().T @ np.asarray(b)
        if self.method == "dense":
            return ((self.vh[:k].conj().T) @ (y / self.sigma[:k])).reshape(self.shape)
        return self.adjoint(uk @ (y / self.sigma[:k] ** 2))


def assemble_operator(spec: ScenarioSpec, grid: ObservationGrid | None = None, decompose: bool = True,
                      **kw) -> RadiationOperator:
    """Build the radiation operator for ``spec`` and (optionally) its SVD."""
    op = RadiationOperator(spec, grid, **kw)
    return op.decompose() if decompose else op


# --------------------------------------------------------------------------
# metrics


def region_power(power, mask, cell_area: float) -> float:
    """``(1 / 2 eta0) * sum(F dA)`` over the masked samples."""
    return float(np.sum(np.asarray(power)[mask]) * cell_area / (2.0 * ETA0))


def coverage_index(power, desired, grid: ObservationGrid) -> tuple[float, float, float]:
    """Return ``(gamma, W_cov, W_ext)`` for a power map and a desired footprint."""
    mask = desired.mask
    if not mask.any() or mask.all():
        raise ValueError("coverage and exterior regions must both contain samples")
    w_cov = region_power(power, mask, grid.cell_area)
    w_ext = region_power(power, ~mask, grid.cell_area)
    if w_ext == 0.0:
        warnings.warn("no power outside the coverage region; coverage index is infinite")
        return math.inf, w_cov, w_ext
    return w_cov / w_ext, w_cov, w_ext
