"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys match
the long flag names, with dashes replaced by underscores). Flags given on the
command line override config values. The resolved configuration is written to
``manifest.json`` in the output directory next to the CSV/JSON artifacts.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import compartmental as comp
from . import lab
from .io import write_columns_csv, write_json
from .master import (
    KGROUP_STATE_BUDGET,
    solve_circle_reduced,
    solve_complete_reduced,
    solve_full_master,
    solve_kgroup_reduced,
)
from .model import (
    BassParams,
    GroupSizes,
    HeteroSpec,
    ValidationError,
    make_circle,
    make_complete,
    make_kgroup,
    network_from_edges,
)
from .odeint import IntegrationError, IntegratorConfig, critical_eps, uniform_grid
from .stochastic import default_workers, monte_carlo

SUBCOMMANDS = ("compartmental", "master", "simulate", "converge", "hetero", "toy", "bound")


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(sp):
    sp.add_argument("--config", help="JSON file with parameter values")
    sp.add_argument("--out", help="output directory (default: out)")
    sp.add_argument("--seed", type=int, help="master seed (default: 0)")
    sp.add_argument("--workers", type=int, help="worker budget (default: BASSLAB_WORKERS or CPU count)")
    sp.add_argument("--rtol", type=float, help="integrator relative tolerance")
    sp.add_argument("--atol", type=float, help="integrator absolute tolerance")
    sp.add_argument("--max-steps", type=int, help="integrator step budget")
    sp.add_argument("--T", type=float, help="time horizon (default: experiment-specific)")
    sp.add_argument("--points", type=int, help="grid points (default: 400)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="basslab", description="Discrete and compartmental Bass model experiments.",
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    sp = sub.add_parser("compartmental", help="solve a compartmental model", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--model", choices=["bass", "circle", "hetero", "mild"])
    sp.add_argument("--p", type=_floats, help="external rate(s)")
    sp.add_argument("--q", type=_floats, help="internal rate(s)")
    sp.add_argument("--a", type=_floats, help="group fractions (mild)")
    sp.add_argument("--spec", help="HeteroSpec JSON file (hetero)")

    sp = sub.add_parser("master", help="solve master equations", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--system", choices=["complete", "circle", "kgroup", "full"])
    sp.add_argument("--M", type=int)
    sp.add_argument("--p", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--spec", help="HeteroSpec JSON file (kgroup)")
    sp.add_argument("--network", help="network JSON file (full)")

    sp = sub.add_parser("simulate", help="Monte Carlo simulation", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--network", help="network JSON file")
    sp.add_argument("--kind", choices=["complete", "circle", "kgroup", "edges"])
    sp.add_argument("--M", type=int)
    sp.add_argument("--p", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--spec", help="HeteroSpec JSON file (kgroup)")
    sp.add_argument("--R", type=int, help="replicates")

    sp = sub.add_parser("converge", help="convergence-rate study", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--family", choices=["complete", "circle", "kgroup"])
    sp.add_argument("--p", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--Ms", type=_ints, help="comma-separated population sizes")
    sp.add_argument("--spec", help="HeteroSpec JSON file (kgroup)")
    sp.add_argument("--budget", type=int, help="state budget (kgroup)")
    sp.add_argument("--trajectories", action="store_true", help="also write per-M trajectory CSVs")

    sp = sub.add_parser("hetero", help="heterogeneous vs homogenised adoption", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--mode", choices=["compare", "counterexample"])
    sp.add_argument("--p", type=_floats)
    sp.add_argument("--q", type=_floats)
    sp.add_argument("--a", type=_floats)

    sp = sub.add_parser("toy", help="toy embedding systems", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--rule", choices=["unit", "geometric"])
    sp.add_argument("--M", type=int)

    sp = sub.add_parser("bound", help="check the eps-norm convergence bound", argument_default=argparse.SUPPRESS)
    _common(sp)
    sp.add_argument("--system", choices=["complete", "circle"])
    sp.add_argument("--M", type=int)
    sp.add_argument("--p", type=float)
    sp.add_argument("--q", type=float)
    sp.add_argument("--eps", type=float, help="absolute eps")
    sp.add_argument("--eps-frac", type=float, help="eps as a fraction of the critical value (default 0.5)")
    return parser


DEFAULTS = {
    "common": {"out": "out", "seed": 0, "points": lab.GRID_POINTS},
    "compartmental": {"model": "bass"},
    "master": {"system": "complete"},
    "simulate": {"R": 1000},
    "converge": {"family": "complete", "budget": KGROUP_STATE_BUDGET, "trajectories": False},
    "hetero": {"mode": "compare"},
    "toy": {"rule": "unit"},
    "bound": {"system": "complete"},
}


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")


def resolve_config(ns: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags. JSON file references are inlined."""
    flags = vars(ns).copy()
    command = flags.pop("command")
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if "config" in flags:
        loaded = _load_json(flags.pop("config"))
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    cfg.update(flags)
    for key in ("spec", "network"):
        if isinstance(cfg.get(key), str):
            cfg[key] = _load_json(cfg[key])
    cfg["command"] = command
    return cfg


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"{cfg['command']}: missing {', '.join('--' + k for k in missing)}")


def _scalar(cfg, key) -> float:
    v = cfg[key]
    if isinstance(v, list):
        if len(v) != 1:
            raise ValidationError(f"--{key} expects a single value")
        v = v[0]
    return float(v)


def _integrator(cfg) -> IntegratorConfig | None:
    kw = {k: float(cfg[k]) for k in ("rtol", "atol") if cfg.get(k) is not None}
    if cfg.get("max_steps") is not None:
        kw["max_steps"] = int(cfg["max_steps"])
    return IntegratorConfig(**kw) if kw else None


def _grid(cfg, default_T):
    T = cfg.get("T")
    T = float(T) if T is not None else float(default_T())
    return uniform_grid(T, int(cfg["points"]))


def _opt_grid(cfg, default_T):
    """``None`` (the experiment's own horizon grid) unless T or points were changed."""
    if cfg.get("T") is None and int(cfg["points"]) == lab.GRID_POINTS:
        return None
    return _grid(cfg, default_T)


def _workers(cfg) -> int:
    w = cfg.get("workers")
    return int(w) if w is not None else default_workers()


def _run_compartmental(cfg, out):
    icfg = _integrator(cfg)
    model = cfg["model"]
    if model in ("bass", "circle"):
        _need(cfg, "p", "q")
        params = BassParams(_scalar(cfg, "p"), _scalar(cfg, "q"))
        fn, hz = (comp.bass_formula, comp.bass_horizon) if model == "bass" else (comp.circle_limit, comp.circle_horizon)
        grid = _grid(cfg, lambda: hz(params))
        cols = {"t": grid, "f": fn(grid, params)}
    else:
        if model == "hetero":
            _need(cfg, "spec")
            spec = HeteroSpec.from_dict(cfg["spec"])
        else:
            _need(cfg, "p", "q", "a")
            spec = HeteroSpec.mild(cfg["a"], cfg["p"], cfg["q"])
        grid = _grid(cfg, lambda: comp.hetero_horizon(spec, cfg=icfg))
        cols = comp.solve_hetero(spec, grid, icfg).as_trajectory().series
        cols = {"t": grid, **cols}
    write_columns_csv(out / "compartmental.csv", cols)
    final = cols["f"] if "f" in cols else cols["f_het"]
    return ["compartmental.csv"], f"compartmental {model}: f(T={grid[-1]:.6g}) = {final[-1]:.10g}"


def _network(cfg):
    """Network from ``cfg['network']`` or from the kind/M/p/q/spec flags."""
    desc = dict(cfg.get("network") or {})
    for key in ("kind", "M", "p", "q", "spec"):
        if cfg.get(key) is not None:
            desc[key] = cfg[key]
    kind = desc.get("kind", "complete")
    if "M" not in desc:
        raise ValidationError("network needs M")
    M = int(desc["M"])
    if kind in ("complete", "circle"):
        if "p" not in desc or "q" not in desc:
            raise ValidationError(f"{kind} network needs p and q")
        params = BassParams(float(desc["p"]), float(desc["q"]))
        net = make_complete(M, params) if kind == "complete" else make_circle(M, params)
        limit_T = lambda: (comp.bass_horizon if kind == "complete" else comp.circle_horizon)(params)
    elif kind == "kgroup":
        if "spec" not in desc:
            raise ValidationError("kgroup network needs spec")
        spec = HeteroSpec.from_dict(desc["spec"])
        net, _ = make_kgroup(spec, M)
        limit_T = lambda: comp.hetero_horizon(spec)
    elif kind == "edges":
        if "p" not in desc or "edges" not in desc:
            raise ValidationError("edges network needs p and edges")
        net = network_from_edges(M, desc["p"], desc["edges"])
        limit_T = None
    else:
        raise ValidationError(f"unknown network kind {kind!r}")
    return net, limit_T


def _run_simulate(cfg, out):
    net, limit_T = _network(cfg)
    if cfg.get("T") is None and limit_T is None:
        raise ValidationError("simulate: --T is required for edge-list networks")
    grid = _grid(cfg, limit_T)
    R = int(cfg["R"])
    mc = monte_carlo(net, R, grid, int(cfg["seed"]), workers=_workers(cfg))
    mc.write(out / "simulate.csv")
    return (["simulate.csv", "simulate.meta.json"],
            f"simulate {net.kind} M={net.M} R={R}: f_mean(T={grid[-1]:.6g}) = {mc.mean[-1]:.10g} +/- {mc.se[-1]:.3g}")


def _run_master(cfg, out):
    icfg = _integrator(cfg)
    system = cfg["system"]
    if system == "full":
        net, limit_T = _network(cfg)
        if cfg.get("T") is None and limit_T is None:
            raise ValidationError("master: --T is required for edge-list networks")
        grid = _grid(cfg, limit_T)
        table = solve_full_master(net, grid, icfg)
        cols = {"t": grid, "f_discrete": table.f_discrete, **table.to_trajectory().series}
        write_columns_csv(out / "master.csv", cols)
        return ["master.csv"], f"master full M={net.M}: f(T={grid[-1]:.6g}) = {table.f_discrete[-1]:.10g}"
    _need(cfg, "M")
    M = int(cfg["M"])
    if system == "kgroup":
        _need(cfg, "spec")
        spec = HeteroSpec.from_dict(cfg["spec"])
        sizes = GroupSizes.from_fractions(spec.a, M)
        grid = _grid(cfg, lambda: comp.hetero_horizon(spec, cfg=icfg))
        sol = solve_kgroup_reduced(spec, sizes, grid, icfg)
        f_lim = comp.solve_hetero(spec, grid, icfg).f_het
    else:
        _need(cfg, "p", "q")
        params = BassParams(_scalar(cfg, "p"), _scalar(cfg, "q"))
        if system == "complete":
            grid = _grid(cfg, lambda: comp.bass_horizon(params))
            sol, f_lim = solve_complete_reduced(M, params, grid, icfg), comp.bass_formula(grid, params)
        else:
            grid = _grid(cfg, lambda: comp.circle_horizon(params))
            sol, f_lim = solve_circle_reduced(M, params, grid, icfg), comp.circle_limit(grid, params)
    cols = {"t": grid, "f_discrete": sol.f_discrete, "f_limit": f_lim, **sol.to_trajectory().series}
    write_columns_csv(out / "master.csv", cols)
    sup = float(np.max(f_lim - sol.f_discrete))
    return ["master.csv"], f"master {system} M={M}: sup_t(f_limit - f_discrete) = {sup:.10g}"


def _run_converge(cfg, out):
    icfg = _integrator(cfg)
    family = cfg["family"]
    _need(cfg, "Ms")
    Ms = cfg["Ms"]
    workers = _workers(cfg)
    if family == "kgroup":
        _need(cfg, "spec")
        spec = HeteroSpec.from_dict(cfg["spec"])
        grid = _opt_grid(cfg, lambda: comp.hetero_horizon(spec, cfg=icfg))
        study = lab.study_kgroup(spec, Ms, grid, icfg, budget=int(cfg["budget"]), workers=workers)
    else:
        _need(cfg, "p", "q")
        p, q = _scalar(cfg, "p"), _scalar(cfg, "q")
        hz = comp.bass_horizon if family == "complete" else comp.circle_horizon
        grid = _opt_grid(cfg, lambda: hz(BassParams(p, q)))
        fn = lab.study_complete if family == "complete" else lab.study_circle
        study = fn(p, q, Ms, grid, icfg, workers=workers)
    paths = study.write(out, trajectories=bool(cfg["trajectories"]))
    if study.fit is None:
        line = f"converge {family}: no fit; max sup_diff = {float(np.max(np.abs(study.diffs))):.3g}"
    else:
        line = (f"converge {family}: slope = {study.fit.slope:.6g}, intercept = {study.fit.intercept:.6g} "
                f"({study.fit.model}, {len(study.Ms)} M values)")
    return [p.name for p in paths], line


def _run_hetero(cfg, out):
    icfg = _integrator(cfg)
    mode = cfg["mode"]
    if mode == "counterexample":
        _need(cfg, "p", "q")
        p, q = _scalar(cfg, "p"), _scalar(cfg, "q")
        grid = _opt_grid(cfg, lambda: comp.hetero_horizon(comp.het_faster_spec(p, q), cfg=icfg))
        rep = lab.hetero_counterexample(p, q, grid, icfg)
        write_columns_csv(out / "hetero.csv", rep.compare.columns())
        summary = {"mode": mode, **rep.summary(), "het_below_hom": rep.compare.het_below_hom}
        line = f"hetero counterexample: f''(0) ratio = {rep.d2_ratio:.6g}, crossing at t = {rep.crossing}"
    else:
        _need(cfg, "p", "q", "a")
        spec = HeteroSpec.mild(cfg["a"], cfg["p"], cfg["q"])
        grid = _opt_grid(cfg, lambda: comp.hetero_horizon(spec, cfg=icfg))
        rep = lab.hetero_compare(cfg["p"], cfg["q"], cfg["a"], grid, icfg)
        write_columns_csv(out / "hetero.csv", rep.columns())
        summary = {
            "mode": mode,
            "homogenized": rep.hom_params.to_dict(),
            "max_gap": float(np.max(rep.gap)),
            "min_gap_t_positive": float(np.min(rep.gap[rep.t > 0])),
            "het_below_hom": rep.het_below_hom,
            "y_positive": rep.y_positive,
            "groups_ordered": rep.groups_ordered,
            "positively_monotone": rep.positively_monotone,
        }
        line = (f"hetero compare: max(f_hom - f_het) = {summary['max_gap']:.6g}, "
                f"het_below_hom = {rep.het_below_hom}")
    write_json(out / "hetero_summary.json", summary)
    return ["hetero.csv", "hetero_summary.json"], line


def _run_toy(cfg, out):
    _need(cfg, "M")
    rule = cfg["rule"]
    default_T = 10.0 if rule == "unit" else 1.0
    grid = _grid(cfg, lambda: default_T)
    run = lab.toy_embedding(rule, int(cfg["M"]), grid, _integrator(cfg))
    write_columns_csv(out / "toy.csv", run.columns())
    if rule == "unit":
        err = float(np.max(np.abs(run.u - run.reference())))
        line = f"toy unit M={run.M}: sup |u - closed form| = {err:.3g}"
    else:
        line = f"toy geometric M={run.M}: u_1(T={grid[-1]:.6g}) = {run.u[-1, 0]:.10g}"
    return ["toy.csv"], line


def _run_bound(cfg, out):
    _need(cfg, "M", "p", "q")
    params = BassParams(_scalar(cfg, "p"), _scalar(cfg, "q"))
    if cfg.get("eps") is not None:
        eps = float(cfg["eps"])
    else:
        eps = float(cfg.get("eps_frac", 0.5)) * critical_eps(params)
    hz = comp.bass_horizon if cfg["system"] == "complete" else comp.circle_horizon
    grid = _opt_grid(cfg, lambda: hz(params, 1e-6))
    rep = lab.verify_bound(cfg["system"], int(cfg["M"]), params.p, params.q, eps, grid, _integrator(cfg))
    doc = {
        "system": rep.system, "M": rep.M, "p": rep.p, "q": rep.q, "eps": rep.eps,
        "eps_tilde": critical_eps(params), "lhs": rep.lhs, "rhs": rep.rhs,
        "rhs_coarse": rep.rhs_coarse, "holds": rep.holds,
    }
    write_json(out / "bound.json", doc)
    return ["bound.json"], f"bound {rep.system} M={rep.M}: lhs = {rep.lhs:.6g} <= rhs = {rep.rhs:.6g}: {rep.holds}"


RUNNERS = {
    "compartmental": _run_compartmental,
    "master": _run_master,
    "simulate": _run_simulate,
    "converge": _run_converge,
    "hetero": _run_hetero,
    "toy": _run_toy,
    "bound": _run_bound,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(ns)
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {out}: {exc.strerror}")
        files, line = RUNNERS[cfg["command"]](cfg, out)
        manifest = {
            "artifact": "artifact",
            "version": artifact_version(),
            "command": cfg["command"],
            "config": {k: v for k, v in sorted(cfg.items()) if k != "command"},
            "outputs": sorted(files),
        }
        write_json(out / "manifest.json", manifest)
    except (ValidationError, ValueError, TypeError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"basslab {ns.command}: error: {msg}", file=sys.stderr)
        return 1
    except IntegrationError as exc:
        print(f"basslab {ns.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    print(line)
    return 0


def main() -> None:
    sys.exit(cli_main())
