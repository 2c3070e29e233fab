"""Command-line interface.

Subcommands: ``simulate``, ``kest``, ``fit``, ``local-fit``, ``select-r``,
``residuals``, ``mc-study``.  Each accepts an optional JSON config file
(``--config``) whose entries are overridden by explicit flags.  Bulk
numeric output is CSV, structured results are JSON; every output file
embeds the resolved configuration in a provenance header.

Exit codes: 0 success, 1 usage error, 2 computational failure.
``--seed`` is mandatory for every stochastic subcommand.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import select_bandwidth, select_r_residual, smooth_residual_field
from .fit import ContrastConfig, PenaltyConfig, fit_global, fit_local
from .kstat import k_homog, k_inhom, k_local_homog, k_local_inhom
from .model import IntensityModel, Window, loglinear_model, make_lag_grid
from .simulate import SCENARIO_IDS, scenario, scenario_pattern
from .study import PLANS, MinimizeOptions, StudyConfig, run_mc_study

__all__ = ["main", "parse_model_string", "parse_window_string"]

_TERM_RE = re.compile(r"^(?:(?P<coef>[A-Za-z_]\w*|[-+]?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)(?:\s*\*\s*(?P<var>[1xyt]))?)$")


def parse_model_string(text: str):
    """Parse the tiny model grammar ``exp(<term> + <term> + ...)``.

    Each term is ``coef`` or ``coef*var`` with ``var`` one of ``1 x y t``
    (a bare coefficient multiplies the constant).  Coefficients are either
    identifiers (free parameters, in order of appearance) or numeric
    literals (fixed values).  Returns (model, names, values) where values
    is None when any coefficient is free.
    """
    text = text.strip()
    m = re.match(r"^exp\((.*)\)$", text)
    if not m:
        raise ValueError(f"model must look like exp(a + b*x), got {text!r}")
    body = m.group(1).replace("-", "+-").lstrip("+")
    names, variables, values = [], [], []
    for raw in body.split("+"):
        term = raw.strip()
        if not term:
            raise ValueError(f"empty term in model {text!r}")
        tm = _TERM_RE.match(term)
        if not tm:
            raise ValueError(f"cannot parse model term {term!r}")
        coef = tm.group("coef")
        var = tm.group("var") or "1"
        try:
            values.append(float(coef))
            names.append(None)
        except ValueError:
            if coef.lstrip("-") != coef:
                raise ValueError(f"cannot parse model term {term!r}") from None
            names.append(coef)
            values.append(None)
        variables.append(var)
    if len(set(variables)) != len(variables):
        raise ValueError(f"duplicate covariate in model {text!r}")
    model = loglinear_model(*variables)
    if all(v is not None for v in values):
        return model.with_theta(values), [f"coef_{v}" for v in variables], values
    if any(v is not None for v in values):
        raise ValueError("mix of free and fixed coefficients is not supported")
    return model, names, None


def parse_window_string(text: str) -> Window:
    """Window flag format: ``x0,x1,y0,y1`` or ``x0,x1,y0,y1,t0,t1``."""
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 4:
        return Window((parts[0], parts[1]), (parts[2], parts[3]))
    if len(parts) == 6:
        return Window((parts[0], parts[1]), (parts[2], parts[3]), (parts[4], parts[5]))
    raise ValueError("window must have 4 or 6 comma-separated bounds")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="kcontrast", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, seed_required):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config file; flags override its entries")
        if seed_required:
            p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
        return p

    p = add("simulate", "simulate a scenario pattern to CSV", True)
    p.add_argument("--scenario", choices=SCENARIO_IDS, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = add("kest", "K-function estimate of a pattern CSV", False)
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--kind", choices=["homog", "inhom", "local-homog", "local-inhom"],
                   default="homog")
    p.add_argument("--model", help="weighting intensity, e.g. exp(2+6*x) (inhom kinds)")
    p.add_argument("--point", type=int, help="point index (local kinds)")
    p.add_argument("--n-r", type=int, default=153)
    p.add_argument("--n-h", type=int, help="temporal lag count (spatio-temporal patterns)")
    p.add_argument("--window", help="x0,x1,y0,y1[,t0,t1] if the CSV lacks a header window")
    p.add_argument("--out", type=Path, required=True)

    for name in ("fit", "local-fit"):
        p = add(name, f"{name.replace('-', ' ')} of a parametric intensity", True)
        p.add_argument("--pattern", type=Path, required=True)
        p.add_argument("--model", required=True, help='model family, e.g. "exp(a+b*x)"')
        p.add_argument("--penalty-R", type=float, dest="penalty_r")
        p.add_argument("--n-r", type=int, default=153)
        p.add_argument("--n-h", type=int)
        p.add_argument("--phi", choices=["constant", "inverse-square"], default="constant")
        p.add_argument("--window")
        p.add_argument("--out", type=Path, help="output JSON (default stdout)")

    p = add("select-r", "residual-based penalty radius selection", True)
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--r-min", type=float, default=0.25)
    p.add_argument("--r-max", type=float, default=10.0)
    p.add_argument("--r-count", type=int, default=20)
    p.add_argument("--n-r", type=int, default=153)
    p.add_argument("--n-h", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--window")
    p.add_argument("--out", type=Path, required=True,
                   help="output prefix: writes <out>.csv trace and <out>.json summary")

    p = add("residuals", "smoothed raw residual field of a fitted model", False)
    p.add_argument("--pattern", type=Path, required=True)
    p.add_argument("--model", required=True, help="concrete intensity, e.g. exp(2+6*x)")
    p.add_argument("--bandwidth", type=float, help="default: cross-validated")
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--window")
    p.add_argument("--out", type=Path, required=True)

    p = add("mc-study", "Monte Carlo study reproducing the report tables", True)
    p.add_argument("--scenario", choices=SCENARIO_IDS, required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--plan", choices=PLANS, default="unpenalized")
    p.add_argument("--penalty-R", type=float, dest="penalty_r")
    p.add_argument("--r-min", type=float, default=0.25)
    p.add_argument("--r-max", type=float, default=10.0)
    p.add_argument("--r-count", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill unset args from the JSON config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    doc = json.loads(Path(args.config).read_text())
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise _UsageError(f"unknown config entry {key!r}")
        if attr not in given:
            setattr(args, attr, value)


def _load_pattern(args):
    window = parse_window_string(args.window) if getattr(args, "window", None) else None
    return io.read_pattern_csv(args.pattern, window=window)


def _grid_for(pattern, args):
    n_h = args.n_h if pattern.is_spatiotemporal else None
    if pattern.is_spatiotemporal and n_h is None:
        n_h = 15
    n_r = args.n_r
    if pattern.is_spatiotemporal and args.n_r == 153 and args.n_h is None:
        n_r = 15  # the spatio-temporal convention
    return make_lag_grid(pattern.window, n_r, n_h)


def _cmd_simulate(args) -> int:
    spec = scenario(args.scenario, alpha=args.alpha, beta=args.beta)
    pattern = scenario_pattern(spec, args.seed)
    config = {
        "command": "simulate",
        "scenario": args.scenario,
        "alpha": args.alpha,
        "beta": args.beta,
        "seed": args.seed,
        "theta": spec.model.theta.tolist(),
    }
    io.write_pattern_csv(pattern, args.out, config)
    print(f"wrote {pattern.n} points to {args.out}")
    return 0


def _cmd_kest(args) -> int:
    pattern = _load_pattern(args)
    grid = _grid_for(pattern, args)
    weights_desc = None
    if args.kind in ("inhom", "local-inhom"):
        if not args.model:
            raise _UsageError(f"--model is required for kind {args.kind}")
        model, _, values = parse_model_string(args.model)
        if values is None:
            raise _UsageError("kest needs a concrete model (numeric coefficients)")
        weights_desc = args.model
    if args.kind.startswith("local") and args.point is None:
        raise _UsageError("--point is required for local kinds")
    if args.kind == "homog":
        est = k_homog(pattern, grid)
    elif args.kind == "inhom":
        est = k_inhom(pattern, grid, model)
    elif args.kind == "local-homog":
        est = k_local_homog(pattern, grid, args.point)
    else:
        est = k_local_inhom(pattern, grid, args.point, model)
    config = {"command": "kest", "kind": args.kind, "model": args.model,
              "point": args.point, "pattern": str(args.pattern)}
    io.write_kest(est, args.out, config=config, weights_description=weights_desc)
    print(f"wrote K estimate to {args.out}")
    return 0


def _fit_common(args, local: bool) -> int:
    pattern = _load_pattern(args)
    model, names, values = parse_model_string(args.model)
    if values is not None:
        raise _UsageError("fit needs free coefficients, e.g. exp(a+b*x)")
    grid = _grid_for(pattern, args)
    contrast = ContrastConfig(grid, phi=args.phi)
    config = {"command": "local-fit" if local else "fit", "model": args.model,
              "penalty_R": args.penalty_r, "seed": args.seed,
              "pattern": str(args.pattern), "phi": args.phi}
    if local:
        result = fit_local(pattern, model, contrast, penalty_r=args.penalty_r, seed=args.seed)
        doc = {
            "config": config,
            "param_names": names,
            "n_points": pattern.n,
            "failed_indices": result.failed_indices,
            "results": [r.to_dict() for r in result.results],
        }
        text = json.dumps(doc, indent=2) + "\n"
    else:
        penalty = None if args.penalty_r is None else PenaltyConfig(R=args.penalty_r)
        result = fit_global(pattern, model, contrast, penalty=penalty, seed=args.seed)
        doc = result.to_dict()
        doc["config"] = config
        doc["param_names"] = names
        text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote fit to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_select_r(args) -> int:
    pattern = _load_pattern(args)
    model, names, values = parse_model_string(args.model)
    if values is not None:
        raise _UsageError("select-r needs free coefficients, e.g. exp(a+b*x)")
    grid = _grid_for(pattern, args)
    contrast = ContrastConfig(grid)
    r_grid = np.geomspace(args.r_min, args.r_max, args.r_count)
    sel = select_r_residual(pattern, model, contrast, r_grid,
                            bandwidth=args.bandwidth, seed=args.seed)
    config = {"command": "select-r", "model": args.model, "seed": args.seed,
              "r_min": args.r_min, "r_max": args.r_max, "r_count": args.r_count,
              "pattern": str(args.pattern)}
    trace_path = Path(str(args.out) + ".csv")
    lines = [io.provenance_line(config), "R,criterion," + ",".join(f"{n}_hat" for n in names)]
    for r, c in zip(sel.r_grid, sel.criterion_values):
        theta = sel.fits[float(r)].theta_hat
        lines.append(",".join([repr(float(r)), repr(float(c))] + [repr(float(v)) for v in theta]))
    trace_path.write_text("\n".join(lines) + "\n")
    summary = {"config": config, "chosen_R": sel.chosen_R, "rule": sel.rule,
               "theta_hat": sel.fits[sel.chosen_R].theta_hat.tolist(),
               "failed_r": sel.failed_r}
    Path(str(args.out) + ".json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"chosen R = {sel.chosen_R:g}; trace in {trace_path}")
    return 0


def _cmd_residuals(args) -> int:
    pattern = _load_pattern(args)
    model, _, values = parse_model_string(args.model)
    if values is None:
        raise _UsageError("residuals needs a concrete model, e.g. exp(2+6*x)")
    bandwidth = args.bandwidth
    if bandwidth is None:
        bandwidth = select_bandwidth(pattern, "cv-mse")
    field = smooth_residual_field(pattern, model, bandwidth, grid=args.grid)
    config = {"command": "residuals", "model": args.model, "bandwidth": bandwidth,
              "grid": args.grid, "pattern": str(args.pattern)}
    lines = [io.provenance_line(config), "x,y,residual"]
    for i, xv in enumerate(field.x):
        for j, yv in enumerate(field.y):
            lines.append(f"{repr(float(xv))},{repr(float(yv))},{repr(float(field.values[i, j]))}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote residual field to {args.out} (integral {field.integral():+.4f})")
    return 0


def _cmd_mc_study(args) -> int:
    r_grid = tuple(np.geomspace(args.r_min, args.r_max, args.r_count))
    config = StudyConfig(
        scenario=args.scenario,
        replicates=args.reps,
        seed=args.seed,
        plan=args.plan,
        penalty_r=args.penalty_r,
        r_grid=r_grid if args.plan in ("penalized-oracle", "penalized-residual") else None,
        workers=args.workers,
    )
    report = run_mc_study(config)
    paths = io.write_study(report, args.out)
    for p in report.params:
        print(f"{p.param}: true={p.true:g} mean={p.mean:.4g} sqrt_mse={p.sqrt_mse:.4g}")
    print(f"wrote {paths['raw']}, {paths['summary']}, {paths['study']}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "kest": _cmd_kest,
    "fit": lambda a: _fit_common(a, local=False),
    "local-fit": lambda a: _fit_common(a, local=True),
    "select-r": _cmd_select_r,
    "residuals": _cmd_residuals,
    "mc-study": _cmd_mc_study,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # computational failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
