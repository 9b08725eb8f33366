"""Command line front end.

Every subcommand loads a scenario (from --config or --preset), runs one
stage of the pipeline and writes its artifacts under --out.  Exit codes:
0 on success, 2 when configuration or hypothesis validation fails, 3 when
a numerical stage breaks down.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .coeffs import build_carleman_weights, classify_degeneracy
from .control import (ControlError, ControlSolution, compose_delay_control,
                      glue_two_sided, hum_control)
from .discretize import Field2, random_final_data, write_field_csv
from .inequalities import (caccioppoli_audit, carleman_audit_deg0,
                           carleman_audit_deg1, carleman_local_audit,
                           hardy_ratio, hardy_ratio_at_zero,
                           manufactured_family, observability_ratio)
from .scenarios import (ConfigError, Scenario, classify_growth,
                        load_scenario, net_reproduction_rate, preset,
                        preset_names, run_scenario, _hardy_functions)
from .solver import lattice_norm, solve_adjoint, solve_forward

__all__ = ["main"]


class _NumericalFailure(RuntimeError):
    pass


def _load(args) -> Scenario:
    if args.config is not None:
        scenario = load_scenario(args.config)
    else:
        scenario = preset(args.preset)
    if getattr(args, "epsilon", None) is not None:
        from dataclasses import replace
        scenario.hum = replace(scenario.hum, epsilon=args.epsilon)
    if getattr(args, "seed", None) is not None:
        scenario.seed = args.seed
        grid = scenario.spec.grid
        scenario.spec = type(scenario.spec)(
            k=scenario.spec.k, rates=scenario.spec.rates, grid=grid,
            omega=scenario.spec.omega,
            y0=random_final_data(grid, seed=args.seed, stream=0))
    return scenario


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _sweep(args) -> tuple[float, ...] | None:
    if args.s_sweep is None:
        return None
    try:
        values = tuple(float(tok) for tok in args.s_sweep.split(","))
    except ValueError:
        raise ConfigError(f"--s-sweep must be comma-separated numbers, "
                          f"got {args.s_sweep!r}") from None
    if not values or any(v <= 0 for v in values):
        raise ConfigError("--s-sweep values must be positive")
    return values


def _cmd_validate(args) -> int:
    if args.config is not None:
        scenario = load_scenario(args.config)
    else:
        scenario = preset(args.preset)
    report = scenario.hypothesis_report()
    for line in report.lines():
        print(line)
    if args.out is not None:
        out = _out_dir(args)
        (out / "hypotheses.txt").write_text("\n".join(report.lines()) + "\n")
    return 0


def _cmd_simulate(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    traj = solve_forward(scenario.spec)
    traj.write_energy_csv(out / "energy.csv")
    write_field_csv(Field2(scenario.spec.grid, traj.final_level()),
                    out / "final_state.csv")
    print(f"forward solve done; final sup norm {traj.norms[-1]:.6g}")
    return 0


def _cmd_adjoint(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    grid = scenario.spec.grid
    v_T = random_final_data(grid, seed=scenario.seed, stream=1)
    traj = solve_adjoint(scenario.spec, v_T)
    traj.write_energy_csv(out / "adjoint_energy.csv")
    write_field_csv(Field2(grid, traj.state.values[0]),
                    out / "adjoint_initial_state.csv")
    print(f"adjoint solve done; sup norm at t=0 is {traj.norms[0]:.6g}")
    return 0


def _emit_report(report, out: Path, stem: str) -> None:
    report.write_csv(out / f"{stem}.csv")
    report.write_summary(out / f"{stem}.json")
    const = report.empirical_constant
    flag = " (s-unstable)" if report.unstable_s else ""
    print(f"{report.name}: empirical constant "
          f"{'n/a' if const is None else f'{const:.6g}'}{flag}")


def _cmd_hardy(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    spec = scenario.spec
    deg = classify_degeneracy(spec.k)
    ran = False
    if deg.degenerate_at_one and deg.theta1 is not None \
            and abs(deg.theta1 - 1.0) > 1e-9:
        theta = float(deg.theta1)
        case = "HP1" if theta < 1.0 else "HP2"
        fns = _hardy_functions(1.0, theta, args.count, scenario.seed)
        _emit_report(hardy_ratio(spec.k, theta, case, fns),
                     out, "hardy_at_one")
        ran = True
    if deg.degenerate_at_zero and deg.theta0 is not None \
            and abs(deg.theta0 - 1.0) > 1e-9:
        theta = float(deg.theta0)
        case = "HP1" if theta < 1.0 else "HP2"
        fns = _hardy_functions(0.0, theta, args.count, scenario.seed)
        _emit_report(hardy_ratio_at_zero(spec.k, theta, case, fns),
                     out, "hardy_at_zero")
        ran = True
    if not ran:
        raise ConfigError("coefficient has no degenerate endpoint with a "
                          "usable exponent; nothing to audit")
    return 0


def _cmd_carleman(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    spec = scenario.spec
    sweep = _sweep(args)
    samples = manufactured_family(spec, args.count, scenario.seed)
    weights = build_carleman_weights(
        spec.grid, spec.k,
        **({"s_sweep": sweep} if sweep is not None else {}))
    deg = classify_degeneracy(spec.k)
    if deg.degenerate_at_one and not deg.degenerate_at_zero:
        _emit_report(carleman_audit_deg1(samples, weights), out,
                     "carleman_deg1")
    else:
        _emit_report(carleman_audit_deg0(samples, weights), out,
                     "carleman_deg0")
    if deg.degenerate_at_zero != deg.degenerate_at_one:
        _emit_report(
            carleman_local_audit(samples, spec.omega, sweep, coef=spec.k),
            out, "carleman_local")
    return 0


def _cmd_caccioppoli(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    spec = scenario.spec
    samples = manufactured_family(spec, args.count, scenario.seed)
    lo, hi = spec.omega
    shrink = 0.25 * (hi - lo)
    psi = lambda x: -(1.0 + 4.0 * np.asarray(x, dtype=float)
                      * (1.0 - np.asarray(x, dtype=float)))
    sweep = _sweep(args)
    s = float(sweep[0]) if sweep else 1.0
    _emit_report(caccioppoli_audit(samples, (lo + shrink, hi - shrink),
                                   spec.omega, psi, s=s),
                 out, "caccioppoli")
    return 0


def _cmd_observability(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    grid = scenario.spec.grid
    ensemble = [random_final_data(grid, seed=scenario.seed, stream=i + 1)
                for i in range(args.count)]
    report = observability_ratio(scenario.spec, ensemble,
                                 scenario.hum.delta)
    _emit_report(report, out, "observability")
    return 0


def _print_control(sol: ControlSolution) -> None:
    print(f"control norm {sol.control_norm:.6g}, final residual "
          f"{sol.final_residual:.6g} <= certificate {sol.certificate:.6g}, "
          f"{sol.cg_iterations} CG iterations")


def _cmd_hum(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    sol = hum_control(scenario.spec, scenario.hum)
    sol.write_cg_csv(out / "control_cg.csv")
    sol.write_summary(out / "control_summary.json")
    _print_control(sol)
    return 0


def _cmd_glue(args) -> int:
    scenario = _load(args)
    out = _out_dir(args)
    sol = glue_two_sided(scenario.spec, scenario.hum,
                         alpha_bar=args.alpha_bar, beta_bar=args.beta_bar)
    sol.write_summary(out / "glue_summary.json")
    write_field_csv(Field2(scenario.spec.grid,
                           sol.y.state.values[-1]), out / "glue_final.csv")
    d = sol.diagnostics
    print(f"glued control: residual {d['residual']:.6g} "
          f"(baseline {d['baseline']:.6g}), final residual "
          f"{sol.final_residual:.6g} <= certificate {sol.certificate:.6g}")
    return 0


def _cmd_r0(args) -> int:
    if args.config is not None:
        scenario = load_scenario(args.config)
    else:
        scenario = preset(args.preset)
    r0 = net_reproduction_rate(scenario.spec.rates, scenario.spec.grid.A)
    label = classify_growth(r0)
    line = f"R0 = {r0:.6g} ({label})"
    if scenario.r0_target is not None:
        line += f"; reference value {scenario.r0_target:g}"
    print(line)
    if args.out is not None:
        _write_json(_out_dir(args) / "r0.json",
                    {"r0": r0, "growth": label,
                     "r0_target": scenario.r0_target})
    return 0


def _cmd_run(args) -> int:
    scenario = _load(args)
    manifest = run_scenario(scenario, args.out)
    print(f"wrote {len(manifest['artifacts'])} artifacts to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="degenpop",
        description="Degenerate age/space structured population models: "
                    "simulation, inequality audits, null control.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path,
                         help="JSON scenario configuration")
        src.add_argument("--preset", choices=preset_names(),
                         default="default_degenerate",
                         help="builtin scenario (default: default_degenerate)")
        p.add_argument("--out", type=Path, required=out_required,
                       help="output directory")
        p.add_argument("--seed", type=int, help="override the scenario seed")

    p = sub.add_parser("validate", help="check structural hypotheses")
    common(p, out_required=False)
    p.set_defaults(handler=_cmd_validate)

    p = sub.add_parser("simulate", help="free forward solve")
    common(p)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("adjoint", help="backward adjoint solve")
    common(p)
    p.set_defaults(handler=_cmd_adjoint)

    p = sub.add_parser("hardy-audit", help="Hardy-Poincare ratio report")
    common(p)
    p.add_argument("--count", type=int, default=100,
                   help="number of random test functions")
    p.set_defaults(handler=_cmd_hardy)

    p = sub.add_parser("carleman-audit",
                       help="weighted Carleman inequality report")
    common(p)
    p.add_argument("--count", type=int, default=3,
                   help="number of manufactured samples")
    p.add_argument("--s-sweep", help="comma separated s values")
    p.set_defaults(handler=_cmd_carleman)

    p = sub.add_parser("caccioppoli-audit",
                       help="interior gradient bound report")
    common(p)
    p.add_argument("--count", type=int, default=3,
                   help="number of manufactured samples")
    p.add_argument("--s-sweep", help="comma separated s values (first used)")
    p.set_defaults(handler=_cmd_caccioppoli)

    p = sub.add_parser("observability", help="empirical observability ratios")
    common(p)
    p.add_argument("--count", type=int, default=20, help="ensemble size")
    p.set_defaults(handler=_cmd_observability)

    p = sub.add_parser("hum", help="penalized HUM control solve")
    common(p)
    p.add_argument("--epsilon", type=float, help="penalization parameter")
    p.set_defaults(handler=_cmd_hum)

    p = sub.add_parser("glue", help="two-sided glued control")
    common(p)
    p.add_argument("--epsilon", type=float, help="penalization parameter")
    p.add_argument("--alpha-bar", type=float, default=0.15,
                   help="left edge of the gluing window")
    p.add_argument("--beta-bar", type=float, default=0.85,
                   help="right edge of the gluing window")
    p.set_defaults(handler=_cmd_glue)

    p = sub.add_parser("r0", help="net reproduction rate")
    common(p, out_required=False)
    p.set_defaults(handler=_cmd_r0)

    p = sub.add_parser("run", help="full pipeline with hashed manifest")
    common(p)
    p.add_argument("--epsilon", type=float, help="penalization parameter")
    p.set_defaults(handler=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ControlError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
