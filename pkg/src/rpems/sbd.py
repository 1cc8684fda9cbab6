"""Micro-scale configurator: binary genetic search for the ON/OFF state matrix
whose realized current best matches a reference current, using a digital
twin of the cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import SurfaceCurrent, cell_average_factors, cell_response, states_to_current
from .scenario import ScenarioSpec

BRUTE_FORCE_MAX_CELLS = 19  # a 4 x 5 aperture is already refused


@dataclass(frozen=True)
class GaConfig:
    population: int = 20
    max_iters: int = 10_000
    fitness_threshold: float = 1e-3
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # None -> 1 / (M N)
    elitism: int = 1
    seed: int = 0
    init: str = "random"  # "random" or "greedy" (seed one cellwise-nearest individual)

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be ≥ 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be ≥ 1")
        for name in ("crossover_rate", "mutation_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be in [0, population)")
        if self.init not in ("random", "greedy"):
            raise ValueError("init must be 'random' or 'greedy'")

    def mutation_for(self, n_bits: int) -> float:
        return 1.0 / n_bits if self.mutation_rate is None else self.mutation_rate


@dataclass
class FitnessRecord:
    best: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    best_states: np.ndarray | None = None
    evaluations: int = 0
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.best)

    @property
    def best_fitness(self) -> float:
        return self.best[-1]


# --------------------------------------------------------------------------
# cost


def micro_cost(states, j_opt: SurfaceCurrent, twin, g, wave, spec: ScenarioSpec, response=None) -> float:
    """Relative mismatch between the reference and the realized current."""
    ref = np.asarray(j_opt.coeffs if isinstance(j_opt, SurfaceCurrent) else j_opt)
    nref = np.linalg.norm(ref)
    if nref == 0:
        raise ValueError("reference current has zero norm")
    real = states_to_current(states, twin, g, wave, spec, response)
    return float(np.linalg.norm(ref - real.coeffs) / nref)


class _Fitness:
    """Vectorized mismatch over a population of flattened state vectors.

    The squared mismatch is a sum of per-cell terms, so it only needs the
    per-cell error for each of the two states.
    """

    def __init__(self, ref, z, weights):
        ref = np.asarray(ref, dtype=complex).ravel()
        w = np.asarray(weights).ravel()
        self.norm2 = float(np.sum(np.abs(ref) ** 2))
        if self.norm2 == 0:
            raise ValueError("reference current has zero norm")
        self.e0 = np.abs(ref - w * z[0]) ** 2
        self.e1 = np.abs(ref - w * z[1]) ** 2
        self.base = float(np.sum(self.e0))
        self.delta = self.e1 - self.e0

    def __call__(self, pop) -> np.ndarray:
        sq = self.base + pop @ self.delta
        return np.sqrt(np.maximum(sq, 0.0) / self.norm2)

    def greedy(self) -> np.ndarray:
        return (self.delta < 0).astype(np.uint8)


# --------------------------------------------------------------------------
# GA


def _tournament(fit, n, rng):
    a = rng.integers(0, len(fit), size=n)
    b = rng.integers(0, len(fit), size=n)
    take_b = (fit[b] < fit[a]) | ((fit[b] == fit[a]) & (b < a))
    return np.where(take_b, b, a)


def ga_step(population, fitnesses, cfg: GaConfig, rng) -> np.ndarray:
    """One generation: elitism, size-2 tournaments, uniform crossover, bit flips."""
    pop = np.asarray(population, dtype=np.uint8)
    fit = np.asarray(fitnesses, dtype=float)
    size, n_bits = pop.shape
    order = np.argsort(fit, kind="stable")
    elite = pop[order[: cfg.elitism]]
    n_child = size - cfg.elitism
    p1 = pop[_tournament(fit, n_child, rng)]
    p2 = pop[_tournament(fit, n_child, rng)]
    cross = rng.random(n_child) < cfg.crossover_rate
    mask = rng.random((n_child, n_bits)) < 0.5
    children = np.where(cross[:, None] & mask, p2, p1)
    flips = rng.random((n_child, n_bits)) < cfg.mutation_for(n_bits)
    children = children ^ flips.astype(np.uint8)
    return np.concatenate([elite, children], axis=0)


def _encode(pop) -> list[int]:
    weights = 1 << np.arange(pop.shape[1] - 1, -1, -1, dtype=np.int64)
    return (pop.astype(np.int64) @ weights).tolist()


def configure(j_opt, twin, g, wave, spec: ScenarioSpec, cfg: GaConfig | None = None, rng=None,
              init_states=None, response=None):
    """Genetic search for the state matrix minimizing the current mismatch.

    The twin is queried once per state.  ``init_states`` (warm start)
    replaces the first individual of the initial population.  Returns
    ``(best states (M, N), FitnessRecord)`` with the best-ever individual.
    """
    cfg = cfg or GaConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ref = np.asarray(j_opt.coeffs if isinstance(j_opt, SurfaceCurrent) else j_opt)
    if ref.shape != spec.shape:
        raise ValueError("reference current does not match the aperture")
    z, _ = cell_response(twin, g, wave) if response is None else response
    fitness = _Fitness(ref, z, cell_average_factors(wave, spec))
    n_bits = ref.size

    pop = rng.integers(0, 2, size=(cfg.population, n_bits), dtype=np.uint8)
    if cfg.init == "greedy":
        pop[0] = fitness.greedy()
    if init_states is not None:
        pop[0] = np.asarray(init_states, dtype=np.uint8).ravel()
    fit = fitness(pop)

    track = n_bits <= BRUTE_FORCE_MAX_CELLS
    seen = set(_encode(pop)) if track else None
    rec = FitnessRecord(evaluations=len(pop))
    best_i = int(np.argmin(fit))
    best_fit, best = float(fit[best_i]), pop[best_i].copy()
    for i in range(1, cfg.max_iters + 1):
        rec.best.append(best_fit)
        rec.mean.append(float(np.mean(fit)))
        if best_fit <= cfg.fitness_threshold:
            rec.stop_reason = "converged"
            break
        if track and len(seen) == 2**n_bits:
            rec.stop_reason = "search space exhausted"
            break
        if i == cfg.max_iters:
            rec.stop_reason = "max iterations"
            break
        pop = ga_step(pop, fit, cfg, rng)
        fit = fitness(pop)
        rec.evaluations += len(pop)
        if track:
            seen.update(_encode(pop))
        k = int(np.argmin(fit))
        if fit[k] < best_fit:
            best_fit, best = float(fit[k]), pop[k].copy()
    states = best.reshape(spec.shape).astype(np.int8)
    rec.best_states = states
    return states, rec


def brute_force_configure(j_opt, twin, g, wave, spec: ScenarioSpec, chunk: int = 1 << 14):
    """Exhaustive search over all ``2**(M N)`` states (``M N < 20``).

    Ties resolve to the lexicographically smallest state (first cell most
    significant).  Returns ``(states, psi)``.
    """
    ref = np.asarray(j_opt.coeffs if isinstance(j_opt, SurfaceCurrent) else j_opt).ravel()
    n_bits = ref.size
    if n_bits > BRUTE_FORCE_MAX_CELLS:
        raise ValueError(f"aperture too large for exhaustive search ({n_bits} > {BRUTE_FORCE_MAX_CELLS} cells)")
    nref = np.linalg.norm(ref)
    if nref == 0:
        raise ValueError("reference current has zero norm")
    z, _ = cell_response(twin, g, wave)
    w = cell_average_factors(wave, spec).ravel()
    shifts = np.arange(n_bits - 1, -1, -1)
    best_k, best_psi = -1, np.inf
    for a in range(0, 2**n_bits, chunk):
        k = np.arange(a, min(a + chunk, 2**n_bits))
        bits = (k[:, None] >> shifts) & 1
        psi = np.linalg.norm(ref - w * z[bits], axis=1) / nref
        i = int(np.argmin(psi))
        if psi[i] < best_psi:
            best_k, best_psi = int(k[i]), float(psi[i])
    bits = (best_k >> shifts) & 1
    return bits.reshape(spec.shape).astype(np.int8), best_psi


def local_phase_error(j_opt, j_star):
    """Per-cell wrapped phase difference ``angle(J_opt) - angle(J_star)`` in (-pi, pi].

    Cells where either current is zero are NaN.  Returns
    ``(sigma, summary)`` with min/max in degrees over valid cells.
    """
    a = np.asarray(j_opt.coeffs if isinstance(j_opt, SurfaceCurrent) else j_opt)
    b = np.asarray(j_star.coeffs if isinstance(j_star, SurfaceCurrent) else j_star)
    if a.shape != b.shape:
        raise ValueError("current shapes differ")
    d = np.angle(a) - np.angle(b)
    sigma = np.pi - np.mod(np.pi - d, 2.0 * np.pi)
    zero = (a == 0) | (b == 0)
    sigma = np.where(zero, np.nan, sigma)
    valid = sigma[~zero]
    summary = {
        "min_deg": float(np.degrees(valid.min())) if valid.size else float("nan"),
        "max_deg": float(np.degrees(valid.max())) if valid.size else float("nan"),
        "max_abs_deg": float(np.degrees(np.abs(valid).max())) if valid.size else float("nan"),
        "zero_cells": int(zero.sum()),
    }
    return sigma, summary
