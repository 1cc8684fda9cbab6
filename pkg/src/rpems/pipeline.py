"""End-to-end orchestration: atom design, digital twin, alphabet, radiation
operator, reference currents, configuration and coverage metrics, with all
artifacts written under one run directory.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import atom, forward, qipm, sbd, surrogate
from .scenario import ScenarioSpec, scenario_to_dict

log = logging.getLogger(__name__)

METHODS = ("qipm", "ipm")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineReport:
    scenario: dict
    seed: int
    methods: list
    run_dir: str
    timings: dict = field(default_factory=dict)
    atom: dict = field(default_factory=dict)
    twin: dict = field(default_factory=dict)
    alphabet: dict = field(default_factory=dict)
    operator: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineReport":
        return cls(**d)


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def new_run_dir(out_dir, seed: int) -> Path:
    base = Path(out_dir)
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    run = base / f"{stamp}-{seed}"
    k = 1
    while run.exists():
        run = base / f"{stamp}-{seed}-{k}"
        k += 1
    run.mkdir(parents=True)
    return run


def design_descriptor(spec: ScenarioSpec, seed: int, g_opt=None):
    cfg = spec.solver["atom"]
    if g_opt is not None:
        g = atom.check_descriptor(g_opt)
        return g, float(atom.design_cost(g, spec.frequency_f0)), "given"
    if not cfg["design"]:
        return atom.NOMINAL_G.copy(), float(atom.design_cost(atom.NOMINAL_G, spec.frequency_f0)), "nominal"
    g, phi = atom.optimize_atom(atom.default_bounds(cfg["rel_bounds"]), int(cfg["budget"]), seed,
                                spec.frequency_f0)
    return g, phi, "optimized"


def build_twin(spec: ScenarioSpec, g, seed: int, kind: str | None = None):
    cfg = spec.solver["twin"]
    kind = kind or cfg["kind"]
    if kind == "oracle":
        return atom.OracleTwin(spec.frequency_f0), {"kind": "oracle"}
    if kind != "kriging":
        raise ValueError(f"unknown twin kind '{kind}'")
    ts = surrogate.oracle_training_set(int(cfg["samples"]), center=g, rel_box=float(cfg["rel_box"]),
                                       rng=seed, wave=spec.incident, f0=spec.frequency_f0)
    model = surrogate.train(ts)
    return surrogate.KrigingTwin(model), {"kind": "kriging", "samples": len(ts), **model.header()}


def qipm_config(spec: ScenarioSpec, seed: int) -> qipm.QipmConfig:
    q = spec.solver["qipm"]
    return qipm.QipmConfig(int(q["max_iters"]), float(q["conv_threshold"]), float(q["svd_rel_threshold"]),
                           seed, q["pairing"])


def ga_config(spec: ScenarioSpec, seed: int) -> sbd.GaConfig:
    c = spec.solver["ga"]
    return sbd.GaConfig(int(c["population"]), int(c["max_iters"]), float(c["fitness_threshold"]),
                        float(c["crossover_rate"]), c["mutation_rate"], int(c["elitism"]), seed, c["init"])


def reference_power(op: forward.RadiationOperator, z_on: complex, weights) -> float:
    """Peak footprint power of the uniform all-ON skin."""
    return float(np.max(np.abs(op.forward(weights * z_on)) ** 2))


def run_pipeline(spec: ScenarioSpec, methods=("qipm", "ipm"), out_dir="runs", seed: int | None = None,
                 g_opt=None, twin_kind: str | None = None, run_dir=None) -> PipelineReport:
    """Run every stage for every time step and method; returns the report."""
    methods = [methods] if isinstance(methods, str) else list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method '{m}'")
    seed = spec.rng_seed if seed is None else int(seed)
    run = Path(run_dir) if run_dir is not None else new_run_dir(out_dir, seed)
    run.mkdir(parents=True, exist_ok=True)
    s_atom, s_twin, s_steps = _seeds(seed, 3)
    step_seeds = _seeds(s_steps, 2 * spec.n_steps)
    timings: dict = {}
    rep = PipelineReport(scenario_to_dict(spec), seed, methods, str(run), timings)
    files: list[Path] = []
    wave = spec.incident

    with _Stage("atom", timings):
        g, phi, how = design_descriptor(spec, s_atom, g_opt)
        pp0, ll0 = atom.oracle_copolar(g, 0, spec.frequency_f0)
        pp1, ll1 = atom.oracle_copolar(g, 1, spec.frequency_f0)
        rep.atom = {
            "g_opt": g.tolist(), "design_cost": phi, "source": how,
            "gap_perp_deg": math.degrees(float(atom.phase_gap(pp1, pp0))),
            "gap_par_deg": math.degrees(float(atom.phase_gap(ll1, ll0))),
        }
    with _Stage("twin", timings):
        twin, rep.twin = build_twin(spec, g, s_twin, twin_kind)
        oracle = atom.OracleTwin(spec.frequency_f0)
    with _Stage("alphabet", timings):
        alphabet = atom.derive_alphabet(g, wave, model=twin)
        response = (alphabet.state_values, alphabet.polarization)
        oracle_response = forward.cell_response(oracle, g, wave)
        rep.alphabet = {
            "mags": alphabet.mags.tolist(), "phases": alphabet.phases.tolist(),
            "polarization": [[p.real, p.imag] for p in alphabet.polarization],
        }
    with _Stage("operator", timings):
        ocfg = spec.solver["operator"]
        op = forward.assemble_operator(spec, memory_budget_mb=float(ocfg["memory_budget_mb"]),
                                       randomized_rank=int(ocfg["randomized_rank"]))
        weights = forward.cell_average_factors(wave, spec)
        p_ref = reference_power(op, alphabet.state_values[1], weights)
        rep.operator = {"method": op.method, "n_samples": op.n_samples, "n_cells": op.n_cells,
                        "retained": op.retained(float(spec.solver["qipm"]["svd_rel_threshold"])),
                        "reference_power": p_ref}
    files.append(art.write_csv(run / "singular_values.csv", ["k", "sigma"],
                               [(k + 1, float(s)) for k, s in enumerate(op.sigma)]))

    gcfg = spec.solver["ga"]
    prev_states = {m: None for m in methods}
    for t, fp in enumerate(spec.footprints, start=1):
        desired = fp.power(p_ref)
        step = {"t": t, "coverage_samples": int(fp.mask.sum()), "methods": {}}
        for method in methods:
            tag = f"{method}_t{t}"
            qcfg = qipm_config(spec, step_seeds[2 * (t - 1)])
            solver = qipm.run_qipm if method == "qipm" else qipm.run_ipm
            t0 = time.perf_counter()
            with _Stage(f"reference_{method}", timings):
                ref, trace = solver(desired, alphabet, op, qcfg, weights=weights)
            t_ref = time.perf_counter() - t0
            with _Stage(f"configure_{method}", timings):
                cfg = ga_config(spec, step_seeds[2 * (t - 1) + 1])
                warm = prev_states[method] if gcfg.get("warm_start") else None
                states, rec = sbd.configure(ref.current, twin, g, wave, spec, cfg, init_states=warm,
                                            response=response)
                prev_states[method] = states
            t_cfg = time.perf_counter() - t0 - t_ref
            with _Stage(f"evaluate_{method}", timings):
                real_twin = forward.states_to_current(states, twin, g, wave, spec, response)
                real = forward.states_to_current(states, oracle, g, wave, spec, oracle_response)
                power = (np.abs(op.forward(real.coeffs)) ** 2).reshape(spec.obs.shape)
                gamma, w_cov, w_ext = forward.coverage_index(power, fp, spec.obs)
                psi_oracle = float(np.linalg.norm(ref.coeffs - real.coeffs) / np.linalg.norm(ref.coeffs))
                sigma_twin, sum_twin = sbd.local_phase_error(ref.current, real_twin)
                sigma, sum_oracle = sbd.local_phase_error(ref.current, real)
                macro = qipm.macro_cost(power.ravel(), desired.ravel(), spec.obs.cell_area)

            files += [
                art.write_current(run / f"current_{tag}.csv", ref.coeffs),
                art.write_csv(run / f"trace_{tag}.csv", ["p", "Phi", "Xi"], trace.rows()),
                art.write_states(run / f"states_{tag}.txt", states),
                art.write_csv(run / f"fitness_{tag}.csv", ["i", "best", "mean"],
                              [(i + 1, b, mn) for i, (b, mn) in enumerate(zip(rec.best, rec.mean))]),
                art.write_csv(run / f"sigma_{tag}.csv", ["m", "n", "sigma_rad"],
                              [(m + 1, n + 1, float(sigma[m, n])) for m in range(spec.m_cells)
                               for n in range(spec.n_cells)]),
                art.write_footprint(run / f"footprint_{tag}.csv", spec.obs, power, p_ref),
                art.write_pgm(run / f"footprint_{tag}.pgm", 10 * np.log10(np.maximum(power / p_ref, 1e-30)),
                              -60.0, 0.0),
                art.write_pgm(run / f"phase_{tag}.pgm", np.angle(ref.coeffs), -np.pi, np.pi),
            ]
            step["methods"][method] = {
                "gamma": gamma, "W_cov": w_cov, "W_ext": w_ext,
                "Phi_reference": trace.cost[ref.iteration - 1], "Phi_realized": macro,
                "Phi_final": trace.cost[-1], "Xi_final": trace.xi[-1],
                "iterations": len(trace), "best_iteration": ref.iteration, "stop_reason": trace.stop_reason,
                "psi_twin": rec.best_fitness, "psi_oracle": psi_oracle,
                "ga_iterations": rec.iterations, "ga_stop_reason": rec.stop_reason,
                "sigma_twin": sum_twin, "sigma_oracle": sum_oracle,
                "time_reference_s": t_ref, "time_configure_s": t_cfg,
            }
        if "qipm" in step["methods"] and "ipm" in step["methods"]:
            gq, gi = step["methods"]["qipm"]["gamma"], step["methods"]["ipm"]["gamma"]
            step["delta_gamma"] = (gq - gi) / gi if gi > 0 else math.inf
        rep.steps.append(step)

    if spec.n_steps >= 2:
        for method in methods:
            w = [s["methods"][method]["W_cov"] for s in rep.steps]
            rep.summary[f"W_cov_ratio_{method}"] = [wi / w[0] if w[0] > 0 else math.inf for wi in w]
    for method in methods:
        rep.summary[f"gamma_{method}"] = [s["methods"][method]["gamma"] for s in rep.steps]
    if "delta_gamma" in rep.steps[0]:
        rep.summary["delta_gamma"] = [s["delta_gamma"] for s in rep.steps]
    rep.files = [p.name for p in files] + ["report.json"]
    art.write_json(run / "report.json", rep.to_dict())
    return rep


def load_report(path) -> PipelineReport:
    import json

    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return PipelineReport.from_dict(json.loads(p.read_text()))


def _signature(rep: PipelineReport) -> tuple:
    s = rep.scenario
    return (s["frequency_f0"], s["height_d"], str(s["obs"]), str(s["footprints"]), str(s["incident"]))


def compare(reports, out_dir=None) -> dict:
    """Tabulate coverage metrics vs aperture size across reports."""
    reports = [r if isinstance(r, PipelineReport) else load_report(r) for r in reports]
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    compatible = len({_signature(r) for r in reports}) == 1
    rows = []
    for r in reports:
        for step in r.steps:
            for method, m in step["methods"].items():
                rows.append({
                    "name": r.scenario.get("name", ""), "run": Path(r.run_dir).name,
                    "M": r.scenario["m_cells"], "N": r.scenario["n_cells"], "t": step["t"],
                    "method": method, "gamma": m["gamma"], "Phi_final": m["Phi_final"],
                    "runtime_s": m["time_reference_s"] + m["time_configure_s"],
                })
    # Delta-gamma between QIPM and IPM rows of the same aperture and step
    by_key: dict = {}
    for row in rows:
        by_key.setdefault((row["M"], row["N"], row["t"]), {})[row["method"]] = row["gamma"]
    for row in rows:
        pair = by_key[(row["M"], row["N"], row["t"])]
        if "qipm" in pair and "ipm" in pair and pair["ipm"] > 0:
            row["delta_gamma"] = (pair["qipm"] - pair["ipm"]) / pair["ipm"]
        else:
            row["delta_gamma"] = math.nan
    rows.sort(key=lambda r: (r["M"] * r["N"], r["t"], r["method"]))
    table = {"compatible": compatible, "rows": rows}
    if not compatible:
        log.warning("reports come from scenarios with different observation setups")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["name", "run", "M", "N", "t", "method", "gamma", "delta_gamma", "Phi_final", "runtime_s"]
        art.write_csv(out / "compare.csv", cols, [[r[c] for c in cols] for r in rows])
        art.write_json(out / "compare.json", table)
    return table
