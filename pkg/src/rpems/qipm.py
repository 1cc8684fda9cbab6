"""Reference-current synthesis by alternating projections.

``run_qipm`` alternates between the set of footprints that meet the desired
lower-bound mask and the set of currents the binary skin can carry;
``run_ipm`` is the same loop without the quantization step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .atom import Alphabet
from .forward import RadiationOperator, SurfaceCurrent


@dataclass(frozen=True)
class QipmConfig:
    max_iters: int = 100
    conv_threshold: float = 1e-4
    svd_rel_threshold: float = 1e-3
    seed: int = 0
    pairing: str = "state"  # "state": realizable (a_s, chi_s); "product": all of A x X

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be ≥ 1")
        if not self.conv_threshold > 0:
            raise ValueError("conv_threshold must be > 0")
        if not 0 < self.svd_rel_threshold < 1:
            raise ValueError("svd_rel_threshold must be in (0, 1)")
        if self.pairing not in ("state", "product"):
            raise ValueError("pairing must be 'state' or 'product'")


@dataclass
class IterationTrace:
    p: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    xi: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, p: int, cost: float, xi: float) -> None:
        self.p.append(p)
        self.cost.append(cost)
        self.xi.append(xi)

    def __len__(self) -> int:
        return len(self.p)

    def rows(self):
        return list(zip(self.p, self.cost, self.xi))


@dataclass(eq=False)
class ReferenceCurrent:
    """Solver output: the current plus, for quantized runs, its alphabet indices."""

    current: SurfaceCurrent
    cost: float
    iteration: int
    mag_index: np.ndarray | None = None  # (M, N) indices into alphabet.mags
    phase_index: np.ndarray | None = None  # (M, N) indices into alphabet.phases
    alphabet: Alphabet | None = None

    @property
    def coeffs(self) -> np.ndarray:
        return self.current.coeffs

    @property
    def magnitudes(self) -> np.ndarray:
        return self.alphabet.mags[self.mag_index]

    @property
    def phases(self) -> np.ndarray:
        return self.alphabet.phases[self.phase_index]

    @property
    def states(self) -> np.ndarray | None:
        """ON/OFF map when every cell uses a realizable state pair."""
        if self.mag_index is None or np.any(self.mag_index != self.phase_index):
            return None
        return self.mag_index.astype(np.int8)


def _check_shapes(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    return a, b


def macro_cost(power, desired, cell_area: float = 1.0) -> float:
    """Area-weighted shortfall ``sum(max(F_des - F, 0)) dA``."""
    f, d = _check_shapes(power, desired)
    return float(np.sum(np.maximum(d - f, 0.0)) * cell_area)


def project_footprint(power, desired) -> np.ndarray:
    """Raise every sample below the desired level up to it."""
    f, d = _check_shapes(power, desired)
    return np.where(f < d, d, f)


def convergence_index(projected, power) -> float:
    """``sum|R - F| / sum|F|`` (the common sample area cancels)."""
    r, f = _check_shapes(projected, power)
    den = np.sum(np.abs(f))
    if den == 0:
        raise ValueError("convergence index undefined for an identically zero footprint")
    return float(np.sum(np.abs(r - f)) / den)


def min_norm_current(projected, phase_ref, op: RadiationOperator, cfg: QipmConfig | None = None) -> np.ndarray:
    """Minimum-norm coefficients for the field ``sqrt(R) * exp(j angle(phase_ref))``."""
    cfg = cfg or QipmConfig()
    r = np.asarray(projected, dtype=float).ravel()
    if np.any(r < 0):
        raise ValueError("projected footprint must be non-negative")
    ref = np.asarray(phase_ref).ravel()
    phase = np.where(ref == 0, 1.0 + 0j, np.exp(1j * np.angle(ref)))
    return op.min_norm(np.sqrt(r) * phase, cfg.svd_rel_threshold)


def _candidates(alphabet: Alphabet, pairing: str):
    """Candidate (mag index, phase index) pairs, state-0 pair first."""
    if pairing == "state":
        pairs = [(0, 0), (1, 1)]
    else:
        pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    mi = np.array([p[0] for p in pairs])
    pi = np.array([p[1] for p in pairs])
    values = alphabet.mags[mi] * np.exp(1j * alphabet.phases[pi])
    return mi, pi, values


def quantize_current(target, alphabet: Alphabet, pairing: str = "product", weights=None):
    """Nearest feasible value per cell.

    Returns ``(alpha, chi, mag_index, phase_index, rho)``.  ``weights`` are
    per-cell factors multiplying every candidate (cell-average incident phase
    at oblique incidence).  Equidistant candidates resolve to the earliest
    one, which puts the state-0 pair first.
    """
    t = np.asarray(target, dtype=complex)
    norm = np.sum(np.abs(t) ** 2)
    if norm == 0:
        raise ValueError("zero-norm target current: mismatch ratio undefined")
    mi, pi, values = _candidates(alphabet, pairing)
    w = np.ones(t.shape) if weights is None else np.asarray(weights)
    dist = np.abs(t[..., None] - w[..., None] * values) ** 2
    k = np.argmin(dist, axis=-1)
    mag_idx, ph_idx = mi[k], pi[k]
    rho = float(np.sum(np.take_along_axis(dist, k[..., None], -1)) / norm)
    return alphabet.mags[mag_idx], alphabet.phases[ph_idx], mag_idx, ph_idx, rho


def _assemble(alphabet: Alphabet, mag_idx, ph_idx, weights) -> np.ndarray:
    return weights * alphabet.mags[mag_idx] * np.exp(1j * alphabet.phases[ph_idx])


def _random_indices(shape, pairing: str, rng):
    a = rng.integers(0, 2, size=shape)
    b = a.copy() if pairing == "state" else rng.integers(0, 2, size=shape)
    return a, b


def _loop(desired, op: RadiationOperator, cfg: QipmConfig, rng, alphabet: Alphabet, weights, quantize: bool,
          cell_area: float, init=None):
    shape = op.shape
    weights = np.ones(shape) if weights is None else np.asarray(weights)
    desired = np.asarray(desired, dtype=float).ravel()
    if desired.shape != (op.n_samples,):
        raise ValueError("desired footprint does not match the operator grid")
    if init is None:
        mag_idx, ph_idx = _random_indices(shape, cfg.pairing, rng)
    else:
        mag_idx, ph_idx = (np.asarray(i) for i in init)
    coeffs = _assemble(alphabet, mag_idx, ph_idx, weights)

    trace = IterationTrace()
    best = None
    for p in range(1, cfg.max_iters + 1):
        e = op.forward(coeffs)
        power = np.abs(e) ** 2
        projected = project_footprint(power, desired)
        cost = macro_cost(power, desired, cell_area)
        xi = convergence_index(projected, power)
        trace.append(p, cost, xi)
        if best is None or cost < best[0]:
            best = (cost, p, coeffs, mag_idx, ph_idx)
        if xi <= cfg.conv_threshold:
            trace.stop_reason = "converged"
            break
        if p == cfg.max_iters:
            trace.stop_reason = "exhausted"
            break
        target = min_norm_current(projected, e, op, cfg)
        if quantize:
            _, _, mag_idx, ph_idx, _ = quantize_current(target, alphabet, cfg.pairing, weights)
            coeffs = _assemble(alphabet, mag_idx, ph_idx, weights)
        else:
            coeffs = target
    cost, p, coeffs, mag_idx, ph_idx = best
    ref = ReferenceCurrent(SurfaceCurrent(coeffs, alphabet.polarization), cost, p)
    if quantize:
        ref.mag_index, ref.phase_index, ref.alphabet = mag_idx, ph_idx, alphabet
    return ref, trace


def run_qipm(desired, alphabet: Alphabet, op: RadiationOperator, cfg: QipmConfig | None = None, rng=None,
             weights=None, cell_area: float | None = None, init=None):
    """Quantized iterative projection.

    ``desired`` is the linear desired power map on the operator grid.
    Returns ``(ReferenceCurrent, IterationTrace)``; the reference is the
    lowest-cost iterate, always inside the feasible set.
    """
    cfg = cfg or QipmConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    area = op.grid.cell_area if cell_area is None else cell_area
    return _loop(desired, op, cfg, rng, alphabet, weights, True, area, init)


def run_ipm(desired, alphabet: Alphabet, op: RadiationOperator, cfg: QipmConfig | None = None, rng=None,
            weights=None, cell_area: float | None = None, init=None):
    """Unquantized baseline: same loop, continuous coefficients.

    The alphabet only provides the random starting point and polarization.
    """
    cfg = cfg or QipmConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    area = op.grid.cell_area if cell_area is None else cell_area
    return _loop(desired, op, cfg, rng, alphabet, weights, False, area, init)
