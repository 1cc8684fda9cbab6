"""Command-line interface.

Exit codes: 0 success, 2 validation error (bad input files or arguments),
1 any other failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import atom, forward, pipeline, qipm, sbd, surrogate
from .scenario import ScenarioError, load_scenario

log = logging.getLogger("rpems")


class UsageError(ValueError):
    pass


def _load_g(path):
    if path is None:
        return atom.NOMINAL_G.copy()
    doc = json.loads(Path(path).read_text())
    g = doc["g_opt"] if isinstance(doc, dict) else doc
    return atom.check_descriptor(np.asarray(g, dtype=float))


def _twin(args, f0):
    if getattr(args, "model", None):
        return surrogate.KrigingTwin(surrogate.KrigingModel.load(args.model))
    return atom.OracleTwin(f0)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _step(spec, t: int):
    if not 1 <= t <= spec.n_steps:
        raise UsageError(f"--t must be in 1..{spec.n_steps}")
    return spec.footprints[t - 1]


# --------------------------------------------------------------------------
# subcommands


def cmd_atom_design(args) -> int:
    if args.bounds:
        b = np.asarray(json.loads(Path(args.bounds).read_text()), dtype=float)
    else:
        b = atom.default_bounds(args.rel_bounds)
    g, phi = atom.optimize_atom(b, args.budget, args.seed, args.f0)
    pp0, ll0 = atom.oracle_copolar(g, 0, args.f0)
    pp1, ll1 = atom.oracle_copolar(g, 1, args.f0)
    out = _out(args)
    doc = {
        "g_opt": g.tolist(), "design_cost": phi, "budget": args.budget, "seed": args.seed,
        "gap_perp_deg": float(np.degrees(atom.phase_gap(pp1, pp0))),
        "gap_par_deg": float(np.degrees(atom.phase_gap(ll1, ll0))),
    }
    art.write_json(out / "atom.json", doc)
    sweep = atom.frequency_sweep(g, np.linspace(args.f0 * 0.8, args.f0 * 1.2, 81))
    art.write_csv(out / "atom_sweep.csv",
                  ["f_hz", "state", "abs_gpp", "arg_gpp_deg", "abs_gll", "arg_gll_deg", "abs_cross"], sweep.tolist())
    print(json.dumps({"design_cost": phi, "out": str(out / "atom.json")}))
    return 0


def cmd_surrogate_train(args) -> int:
    g = _load_g(args.atom)
    ts = surrogate.oracle_training_set(args.samples, center=g, rel_box=args.rel_box, rng=args.seed, f0=args.f0)
    model = surrogate.train(ts)
    out = _out(args) / args.name
    model.save(out)
    print(json.dumps({"model": str(out), **model.header()}))
    return 0


def cmd_surrogate_eval(args) -> int:
    model = surrogate.KrigingModel.load(args.model)
    lo, hi = model.lo, model.hi
    center = atom.expand_free((lo + hi) / 2.0)
    rel = float(np.max((hi - lo) / (hi + lo)))
    ts = surrogate.oracle_training_set(args.samples, center=center, rel_box=rel, rng=args.seed + 1, f0=model.f0)
    pred, _ = model.predict(ts.g, ts.s)
    rmse = np.sqrt(np.mean((pred - ts.y) ** 2, axis=0))
    span = ts.y.max(axis=0) - ts.y.min(axis=0)
    rep = {n: {"rmse": float(r), "range": float(s)} for n, r, s in zip(surrogate.OUTPUT_NAMES, rmse, span)}
    art.write_json(_out(args) / "surrogate_eval.json", rep)
    print(json.dumps({"max_rmse_over_range": float(np.max(np.where(span > 0, rmse / np.where(span > 0, span, 1), 0)))}))
    return 0


def _setup(args):
    spec = load_scenario(args.scenario)
    g = _load_g(args.atom)
    twin = _twin(args, spec.frequency_f0)
    return spec, g, twin


def cmd_current(args) -> int:
    spec, g, twin = _setup(args)
    fp = _step(spec, args.t)
    alphabet = atom.derive_alphabet(g, spec.incident, model=twin)
    ocfg = spec.solver["operator"]
    op = forward.assemble_operator(spec, memory_budget_mb=ocfg["memory_budget_mb"],
                                   randomized_rank=ocfg["randomized_rank"])
    w = forward.cell_average_factors(spec.incident, spec)
    p_ref = pipeline.reference_power(op, alphabet.state_values[1], w)
    cfg = pipeline.qipm_config(spec, args.seed)
    if args.iters is not None:
        cfg = qipm.QipmConfig(args.iters, cfg.conv_threshold, cfg.svd_rel_threshold, cfg.seed, cfg.pairing)
    solver = qipm.run_qipm if args.method == "qipm" else qipm.run_ipm
    ref, trace = solver(fp.power(p_ref), alphabet, op, cfg, weights=w)
    out = _out(args)
    tag = f"{args.method}_t{args.t}"
    art.write_current(out / f"current_{tag}.csv", ref.coeffs)
    art.write_csv(out / f"trace_{tag}.csv", ["p", "Phi", "Xi"], trace.rows())
    art.write_pgm(out / f"phase_{tag}.pgm", np.angle(ref.coeffs), -np.pi, np.pi)
    print(json.dumps({"Phi_best": ref.cost, "iterations": len(trace), "stop_reason": trace.stop_reason}))
    return 0


def cmd_configure(args) -> int:
    spec, g, twin = _setup(args)
    ref = art.read_current(args.current)
    if ref.shape != spec.shape:
        raise UsageError(f"current shape {ref.shape} does not match the aperture {spec.shape}")
    base = pipeline.ga_config(spec, args.seed)
    cfg = sbd.GaConfig(
        args.population or base.population, args.iters or base.max_iters,
        base.fitness_threshold if args.threshold is None else args.threshold,
        base.crossover_rate if args.crossover is None else args.crossover,
        base.mutation_rate if args.mutation is None else args.mutation,
        base.elitism, args.seed, args.init or base.init,
    )
    warm = art.read_states(args.warm_start) if args.warm_start else None
    states, rec = sbd.configure(ref, twin, g, spec.incident, spec, cfg, init_states=warm)
    real = forward.states_to_current(states, twin, g, spec.incident, spec)
    sigma, summary = sbd.local_phase_error(ref, real)
    out = _out(args)
    art.write_states(out / "states.txt", states)
    art.write_csv(out / "fitness.csv", ["i", "best", "mean"],
                  [(i + 1, b, m) for i, (b, m) in enumerate(zip(rec.best, rec.mean))])
    art.write_csv(out / "sigma.csv", ["m", "n", "sigma_rad"],
                  [(m + 1, n + 1, float(sigma[m, n])) for m in range(spec.m_cells) for n in range(spec.n_cells)])
    print(json.dumps({"psi": rec.best_fitness, "iterations": rec.iterations, "stop_reason": rec.stop_reason,
                      "sigma_deg": summary}))
    return 0


def cmd_evaluate(args) -> int:
    spec, g, _ = _setup(args)
    fp = _step(spec, args.t)
    states = art.read_states(args.states)
    oracle = atom.OracleTwin(spec.frequency_f0)
    current = forward.states_to_current(states, oracle, g, spec.incident, spec)
    field = forward.footprint(current, spec)
    z_on = forward.cell_response(oracle, g, spec.incident)[0][1]
    on = forward.footprint(forward.uniform_current(z_on, spec, spec.incident), spec)
    p_ref = float(on.power.max())
    gamma, w_cov, w_ext = forward.coverage_index(field.power, fp, spec.obs)
    out = _out(args)
    art.write_footprint(out / "footprint.csv", spec.obs, field.power, p_ref)
    art.write_pgm(out / "footprint.pgm", 10 * np.log10(np.maximum(field.power / p_ref, 1e-30)), -60.0, 0.0)
    doc = {"gamma": gamma, "W_cov": w_cov, "W_ext": w_ext, "reference_power": p_ref}
    art.write_json(out / "metrics.json", doc)
    print(json.dumps(doc))
    return 0


def cmd_pipeline(args) -> int:
    spec = load_scenario(args.scenario)
    methods = ["qipm", "ipm"] if args.method == "both" else [args.method]
    g = _load_g(args.atom) if args.atom else None
    rep = pipeline.run_pipeline(spec, methods, out_dir=args.out_dir, seed=args.seed, g_opt=g, twin_kind=args.twin)
    print(json.dumps({"run_dir": rep.run_dir, **rep.summary}))
    return 0


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    table = pipeline.compare(args.reports, out_dir=args.out_dir)
    print(json.dumps({"compatible": table["compatible"], "rows": len(table["rows"])}))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand; SUPPRESS keeps
    # a subparser from overwriting a value given earlier on the line.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (default: scenario seed, else 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default: runs)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="rpems", description="Single-bit reconfigurable skin synthesis",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("atom", help="meta-atom tools", parents=[common])
    asub = a.add_subparsers(dest="atom_command", required=True)
    d = asub.add_parser("design", help="optimize the cell descriptor", parents=[common])
    d.add_argument("--bounds", help="JSON file with a 16x2 [[lo, hi], ...] box")
    d.add_argument("--rel-bounds", type=float, default=0.2, help="relative box around the nominal cell")
    d.add_argument("--budget", type=int, default=5000)
    d.add_argument("--f0", type=float, default=atom.F0_DESIGN)
    d.set_defaults(func=cmd_atom_design)

    s = sub.add_parser("surrogate", help="Kriging digital twin", parents=[common])
    ssub = s.add_subparsers(dest="surrogate_command", required=True)
    t = ssub.add_parser("train", parents=[common])
    t.add_argument("--samples", type=int, default=2000)
    t.add_argument("--rel-box", type=float, default=0.05)
    t.add_argument("--atom", help="atom.json with g_opt (default: nominal cell)")
    t.add_argument("--f0", type=float, default=atom.F0_DESIGN)
    t.add_argument("--name", default="twin.krg")
    t.set_defaults(func=cmd_surrogate_train)
    e = ssub.add_parser("eval", parents=[common])
    e.add_argument("--model", required=True)
    e.add_argument("--samples", type=int, default=2000)
    e.set_defaults(func=cmd_surrogate_eval)

    def scenario_cmd(name, helptext):
        c = sub.add_parser(name, help=helptext, parents=[common])
        c.add_argument("scenario")
        c.add_argument("--atom", help="atom.json with g_opt (default: nominal cell)")
        c.add_argument("--model", help="Kriging model file (default: analytic oracle)")
        return c

    c = scenario_cmd("current", "solve for a reference current")
    c.add_argument("--method", choices=["qipm", "ipm"], default="qipm")
    c.add_argument("--iters", type=int)
    c.add_argument("--t", type=int, default=1, help="time step (1-based)")
    c.set_defaults(func=cmd_current)

    c = scenario_cmd("configure", "find the ON/OFF states for a reference current")
    c.add_argument("--current", required=True, help="current CSV from 'current'")
    c.add_argument("--population", type=int)
    c.add_argument("--iters", type=int)
    c.add_argument("--threshold", type=float)
    c.add_argument("--crossover", type=float)
    c.add_argument("--mutation", type=float)
    c.add_argument("--init", choices=["random", "greedy"])
    c.add_argument("--warm-start", help="state grid to seed the population")
    c.set_defaults(func=cmd_configure)

    c = scenario_cmd("evaluate", "footprint and coverage of a state grid")
    c.add_argument("--states", required=True)
    c.add_argument("--t", type=int, default=1)
    c.set_defaults(func=cmd_evaluate)

    c = scenario_cmd("pipeline", "run every stage end to end")
    c.add_argument("--method", choices=["qipm", "ipm", "both"], default="both")
    c.add_argument("--twin", choices=["oracle", "kriging"])
    c.set_defaults(func=cmd_pipeline)

    c = sub.add_parser("compare", help="tabulate several pipeline reports", parents=[common])
    c.add_argument("reports", nargs="*", help="report.json files or run directories")
    c.set_defaults(func=cmd_compare)
    return p


def _defaults(args):
    for name, value in (("seed", None), ("out_dir", "runs"), ("threads", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, value)
    if args.seed is None and args.func is not cmd_pipeline:
        args.seed = 0
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    args = _defaults(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ScenarioError, UsageError, FileNotFoundError, atom.AtomError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pipeline.StageError as exc:
        code = 2 if isinstance(exc.cause, (ScenarioError, ValueError)) else 1
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
