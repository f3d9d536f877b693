"""Command-line front end: simulate, optimize, verify and mesh-study.

Exit codes: 0 success, 1 verification failed, 2 configuration could not be
parsed, 3 model or input validation failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .crawler import model_from_dict, recover_position
from .exceptions import CrawlOptError, Infeasible, UniquenessViolation
from .optimizer import SolverConfig, optimize
from .stationarity import (FEAS_TOL, averaged_controls, classify_degenerate,
                           extract_multipliers, one_link_process)
from .sweeping import ControlGrid, fmt, periodic_orbit, simulate
from .transcription import (GaitProblem, ReferenceProcess, build_anchored,
                            cost_from_dict, solve_anchored)

logger = logging.getLogger("crawlopt")

EXIT_OK, EXIT_VERIFY, EXIT_PARSE, EXIT_VALIDATION = 0, 1, 2, 3


class ParseError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict
    seed: int
    out: str
    options: dict = field(default_factory=dict)

    @property
    def content_hash(self):
        """Git-style blob hash of the canonical manifest content."""
        body = json.dumps({"subcommand": self.subcommand,
                           "inputs": self.inputs, "seed": self.seed,
                           "options": self.options},
                          sort_keys=True).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def to_json(self):
        data = asdict(self)
        data["hash"] = self.content_hash
        return json.dumps(data, indent=2, sort_keys=True)


def _load_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"{what}: cannot read {path}: {exc}") from exc
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise ParseError(f"{what}: invalid JSON in {path}: {exc}") from exc


def _digest(text):
    return hashlib.sha1(text.encode()).hexdigest()


def _load_model(path):
    data, text = _load_json(path, "model")
    try:
        model = model_from_dict(data)
    except KeyError as exc:
        raise ParseError(f"model: missing field {exc.args[0]!r}") from exc
    except UniquenessViolation as exc:
        raise CrawlOptError(f"model.mu_plus/mu_minus: {exc}") from exc
    except (CrawlOptError, ValueError) as exc:
        raise CrawlOptError(f"model: {exc}") from exc
    return model, text


def _load_cost(path, model):
    if path is None:
        return cost_from_dict({}, model), ""
    data, text = _load_json(path, "cost")
    try:
        return cost_from_dict(data, model), text
    except ValueError as exc:
        raise CrawlOptError(f"cost.f2.kind: {exc}") from exc


def _load_gait(path, model):
    data, text = _load_json(path, "controls")
    try:
        grid = ControlGrid.from_dict(data)
    except KeyError as exc:
        raise ParseError(f"controls: missing field {exc.args[0]!r}") from exc
    except (CrawlOptError, ValueError) as exc:
        raise CrawlOptError(f"controls.values: {exc}") from exc
    if grid.d != model.dynamics.d:
        raise CrawlOptError(f"controls.values: {grid.d} components, model "
                            f"needs {model.dynamics.d}")
    if not grid.is_feasible():
        raise CrawlOptError(f"controls.values: infeasible {grid.violations()}")
    x0 = data.get("x0")
    return grid, (None if x0 is None else np.atleast_1d(
        np.asarray(x0, float))), text


def _mesh_range(text):
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError as exc:
        raise ParseError(f"--mesh-range: expected a..b, got {text!r}") \
            from exc
    if lo < 1 or hi < lo:
        raise ParseError(f"--mesh-range: empty range {text!r}")
    return lo, hi


def _run_trajectory(model, grid, x0):
    if x0 is None:
        traj, periods = periodic_orbit(model.C, model.dynamics, grid,
                                       model.C.interior_point)
    else:
        traj = simulate(model.C, model.dynamics, grid, x0)
        periods = 0
    return traj, periods


def _write(out, name, text):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_simulate(args):
    model, mtext = _load_model(args.model)
    cost, ctext = _load_cost(args.cost, model)
    grid, x0, gtext = _load_gait(args.controls, model)
    traj, periods = _run_trajectory(model, grid, x0)
    recover_position(model, traj)
    h = grid.h
    J = float(h * np.sum(cost.f1_batch(traj.reactions)
                         - cost.f2_batch(0.0, grid.values)))
    out = Path(args.out)
    _write(out, "trajectory.csv", traj.to_csv())
    summary = {"J": fmt(J),
               "displacement": fmt(traj.positions[-1] - traj.positions[0]),
               "periodicity_gap": fmt(traj.periodicity_gap),
               "periods_used": periods}
    _write(out, "summary.json", json.dumps(summary, indent=2) + "\n")
    manifest = RunManifest("simulate", {"model": _digest(mtext),
                                        "cost": _digest(ctext),
                                        "controls": _digest(gtext)},
                           args.seed, str(out))
    _write(out, "manifest.json", manifest.to_json() + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def _solver_config(args):
    data, text = ({}, "")
    if args.solver:
        data, text = _load_json(args.solver, "solver")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.tv_bound is not None:
        data["tv_bound"] = args.tv_bound
    try:
        return SolverConfig.from_dict(data), text
    except (TypeError, ValueError) as exc:
        raise CrawlOptError(f"solver: {exc}") from exc


def cmd_optimize(args):
    model, mtext = _load_model(args.model)
    cost, ctext = _load_cost(args.cost, model)
    config, stext = _solver_config(args)
    problem = GaitProblem.from_model(model, cost, args.mesh,
                                     tv_bound=config.tv_bound)
    result = optimize(problem, config)
    out = Path(args.out)
    gait = result.grid.to_dict()
    gait["x0"] = result.x0.tolist()
    gait["J"] = result.J
    _write(out, "gait.json", json.dumps(gait, indent=2) + "\n")
    _write(out, "history.csv", result.history_csv())
    if args.certify:
        traj = simulate(model.C, model.dynamics, result.grid, result.x0)
        try:
            cert = extract_multipliers(
                traj, problem,
                request="nondegenerate" if args.nondegenerate else "any")
            _write(out, "certificate.json", cert.to_json() + "\n")
            _write(out, "certificate.txt", cert.report() + "\n")
        except Infeasible as exc:
            _write(out, "certificate.txt", f"no certificate: {exc}\n")
    manifest = RunManifest("optimize", {"model": _digest(mtext),
                                        "cost": _digest(ctext),
                                        "solver": _digest(stext)},
                           config.seed, str(out),
                           {"mesh": args.mesh, "certify": args.certify,
                            "tv_bound": config.tv_bound})
    _write(out, "manifest.json", manifest.to_json() + "\n")
    print(json.dumps({"J": fmt(result.J)}))
    return EXIT_OK


def cmd_verify(args):
    model, mtext = _load_model(args.model)
    cost, _ = _load_cost(args.cost, model)
    grid, x0, _ = _load_gait(args.controls, model)
    traj, _ = _run_trajectory(model, grid, x0)
    problem = GaitProblem(model.C, model.dynamics, cost, model.box, model.T,
                          grid.m, traj.states[0])
    try:
        cert = extract_multipliers(
            traj, problem,
            request="nondegenerate" if args.nondegenerate else "any",
            min_lambda=args.min_lambda)
    except Infeasible as exc:
        print(f"verification failed: {exc}")
        return EXIT_VERIFY
    cert.label = classify_degenerate(cert)
    print(cert.report(args.threshold))
    if args.out:
        out = Path(args.out)
        _write(out, "certificate.json", cert.to_json() + "\n")
    ok = all(v <= args.threshold for v in cert.residuals.values())
    return EXIT_OK if ok else EXIT_VERIFY


def _l_inf_between(coarse, fine):
    return float(np.abs(fine.states[::2] - coarse.states).max())


def cmd_mesh_study(args):
    model, mtext = _load_model(args.model)
    cost, _ = _load_cost(args.cost, model)
    lo, hi = _mesh_range(args.mesh_range)
    if args.controls:
        grid, x0, _ = _load_gait(args.controls, model)
        fine_traj, _ = _run_trajectory(model, grid, x0)
        ref = ReferenceProcess.from_grid(grid, fine_traj)
    elif hasattr(model, "one_link_bounds"):
        a, b = model.one_link_bounds
        ref = one_link_process(a, b, model.T)
    else:
        raise CrawlOptError("controls: a reference gait is required for "
                            "models other than the one-link abstraction")
    x0 = ref.states[0]
    rows = []
    prev = None
    for m in range(lo, hi + 2 if hi > lo else hi + 1):
        grid_m = ControlGrid(averaged_controls(ref, m), model.T, model.box)
        traj_m = simulate(model.C, model.dynamics, grid_m, x0)
        if m > hi:
            rows[-1]["dx_next"] = _l_inf_between(prev, traj_m)
            break
        J = float(grid_m.h * np.sum(cost.f1_batch(traj_m.reactions)
                                    - cost.f2_batch(0.0, grid_m.values)))
        pm = build_anchored(ref, model.C, model.dynamics, cost, model.box, m,
                            eps_bar=args.eps_bar)
        sol = solve_anchored(pm)
        if rows:
            rows[-1]["dx_next"] = _l_inf_between(prev, traj_m)
        rows.append({"m": m, "J_m": J, "dx_next": float("nan"),
                     "control_error": sol.control_error,
                     "kappa_penalty": sol.kappa_penalty})
        prev = traj_m
    header = "m,J_m,dx_next,control_error,kappa_penalty"
    lines = [header] + [",".join([str(r["m"]), fmt(r["J_m"]),
                                  fmt(r["dx_next"]), fmt(r["control_error"]),
                                  fmt(r["kappa_penalty"])]) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), "mesh_study.csv", text)
    print(text, end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="crawlopt")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, controls=False):
        p.add_argument("--model", required=True)
        p.add_argument("--cost")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if controls:
            p.add_argument("--controls", required=True)

    p = sub.add_parser("simulate")
    common(p, controls=True)
    p.set_defaults(func=cmd_simulate, out_default="simulate-out")

    p = sub.add_parser("optimize")
    common(p)
    p.add_argument("--solver")
    p.add_argument("--mesh", type=int, default=8)
    p.add_argument("--tv-bound", type=float, default=None)
    p.add_argument("--certify", action="store_true")
    p.add_argument("--nondegenerate", action="store_true")
    p.set_defaults(func=cmd_optimize, out_default="optimize-out")

    p = sub.add_parser("verify")
    common(p, controls=True)
    p.add_argument("--nondegenerate", action="store_true")
    p.add_argument("--min-lambda", type=float, default=0.0)
    p.add_argument("--threshold", type=float, default=FEAS_TOL)
    p.set_defaults(func=cmd_verify, out_default=None)

    p = sub.add_parser("mesh-study")
    common(p)
    p.add_argument("--controls")
    p.add_argument("--mesh-range", default="4..8")
    p.add_argument("--eps-bar", type=float, default=0.5)
    p.set_defaults(func=cmd_mesh_study, out_default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format="%(levelname)s %(message)s")
    if args.out is None:
        args.out = args.out_default
    if args.seed is None and args.command != "optimize":
        args.seed = 0
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except CrawlOptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
