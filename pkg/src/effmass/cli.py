"""Command-line entry point: ``effmass {bands,simulate,analyze,reproduce,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import bandstructure as bs
from . import scenario as sc
from .units import LatticeConfig

log = logging.getLogger("effmass")


def _bands(args):
    bd = bs.solve_bands(args.s, bs.symmetric_k_grid(args.nk), args.n_bands, args.cutoff)
    out = Path(args.output or f"bands_s{args.s:g}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    bd.to_csv(out)
    ik = bd.index_of(0.0)
    lat = LatticeConfig(s=args.s)
    print(f"s={args.s:g}: Delta_21(0)={bd.gaps[ik, 1, 0]:.6g} E_r "
          f"(h/Delta = {2 * np.pi * lat.t_r / bd.gaps[ik, 1, 0] * 1e6:.4g} us), "
          f"m*_1(0)/m0={bd.eff_mass[ik, 0]:.6g} -> {out}")
    return sc.EXIT_OK


def _report_rows(rows):
    for r in rows:
        msg = (f"{r['label']}: omega_B={r.get('omega_B', np.nan):.5g} rad/s "
               f"(Fd/hbar={r['omega_B_theory']:.5g}), omega_d={r.get('omega_d', np.nan):.5g} rad/s, "
               f"m_eff/m0={r.get('m_eff', np.nan):.4g}, m_dyn/m0={r.get('m_dyn', np.nan):.4g}")
        if r["error"]:
            msg += f"  [error: {r['error']}]"
        print(msg)
    return sc.EXIT_RUNTIME if any(r["error"] for r in rows) else sc.EXIT_OK


def _simulate(args):
    out, rows = sc.run_scenario(args.config, args.output, args.threads, args.seed)
    print(f"bundle written to {out}")
    return _report_rows(rows)


def _reproduce(args):
    out = args.output or f"out/{args.figure}"
    bundle, rows = sc.run_scenario(args.figure, out, args.threads, args.seed)
    print(f"{args.figure}: bundle written to {bundle}")
    return _report_rows(rows)


def _analyze(args):
    trace = an.load_trace_csv(args.trace)
    lat = LatticeConfig(s=args.s if args.s is not None else 0.0)
    F = lat.force_from_acceleration(args.acceleration) if args.acceleration is not None else None
    window = lat.to_recoil(args.window, "time")
    fit = an.fit_two_sine(trace.t, trace.velocity, window=(trace.t[0], trace.t[0] + window), force=F)
    out = Path(args.output or Path(args.trace).with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    an.write_json(fit, out / "fit.json")
    an.write_residuals(fit, trace.t, trace.velocity, out / "residuals.csv")
    record = {"omega_d_rad_s": fit.omega_d / lat.t_r, "omega_B_rad_s": fit.omega_B / lat.t_r}
    if F:
        m = an.extract_masses(fit, F)
        record.update(m.to_dict())
        an.write_json(m, out / "masses.json")
    print(json.dumps(record, indent=2, sort_keys=True))
    return sc.EXIT_OK


def _validate(args):
    rep = sc.validate(args.config, args.output)
    for line in rep.lines():
        print(line)
    print("valid" if rep.ok else f"{len(rep.errors)} error(s)")
    return sc.EXIT_OK if rep.ok else sc.EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="effmass", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output", help="output file or directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    b = sub.add_parser("bands", parents=[common], help="band table CSV for one depth")
    b.add_argument("--s", type=float, default=9.4, help="lattice depth in E_r")
    b.add_argument("--n-bands", type=int, default=bs.DEFAULT_BANDS)
    b.add_argument("--cutoff", type=int, default=bs.DEFAULT_CUTOFF)
    b.add_argument("--nk", type=int, default=bs.DEFAULT_NK)
    b.set_defaults(func=_bands)

    s = sub.add_parser("simulate", parents=[common], help="run a scenario config into a bundle")
    s.add_argument("config", help="YAML scenario file")
    s.set_defaults(func=_simulate)

    r = sub.add_parser("reproduce", parents=[common], help="run a builtin figure scenario")
    r.add_argument("figure", choices=sorted(sc.BUILTINS))
    r.set_defaults(func=_reproduce)

    a = sub.add_parser("analyze", parents=[common], help="two-sine fit of a velocity trace CSV")
    a.add_argument("trace", help="CSV with t/t_r and v/v_r columns")
    a.add_argument("--acceleration", type=float, help="F/m0 in m/s^2 (enables mass extraction)")
    a.add_argument("--s", type=float, default=None)
    a.add_argument("--window", type=float, default=an.DEFAULT_WINDOW_S, help="fit window in s")
    a.set_defaults(func=_analyze)

    v = sub.add_parser("validate", parents=[common], help="check a scenario without running it")
    v.add_argument("config", help="YAML scenario file or builtin name")
    v.set_defaults(func=_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except sc.ConfigError as exc:
        print(exc, file=sys.stderr)
        return sc.EXIT_VALIDATION
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return sc.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
