"""Command-line interface.

    python3 -m mfsmp <simulate|validate|riccati-table|solve|cost> [--config cfg.json] [--out dir] [--seed N]

Exit codes: 0 success, 1 a check failed or an iteration did not converge,
2 configuration error. Every run writes ``manifest.json`` listing its
artifacts with SHA-256 digests.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import adjoint, chain, cost, examples, girsanov
from .errors import ConfigError, MfsmpError, NoConvergence
from .girsanov import uniform_grid
from .meanfield import MeanCurve
from .problem import ControlProblem

PROBLEMS = ("ex1", "ex2", "schlogl", "custom")
CONTROLS = ("smp", "closed_form", "constant")


@dataclass
class RunConfig:
    problem: str = "ex1"
    # two-state examples
    a: int = 0
    b: int = 1
    alpha: float = 1.0
    m0: float = 0.0
    h_a: float = 0.0
    h_b: float = 1.0
    g_ab: float = 1.0
    g_ba: float = 1.0
    # Schloegl
    beta: float = 0.1
    n_max: int = 20
    birth: float = 1.0
    x0: int = 0
    # custom: reference generator and constant controlled rates over `states`
    states: Optional[list] = None
    g_rates: Optional[list] = None
    rates: Optional[list] = None
    # control under study
    control: str = "smp"
    u_const: float = 1.0
    perturb: float = 0.0
    u_max: float = 10.0
    # numerics
    horizon: float = 1.0
    dt: float = 1e-4
    t_max: float = 100.0
    cells: int = 256
    n_paths: int = 100_000
    seed: int = 42
    damping: float = 0.5
    tol: float = 0.02
    max_iters: int = 50
    smp_tol: float = 1e-8
    max_rounds: int = 50
    mean_method: str = "ode"
    stationarity_tol: float = 1e-6
    table: Optional[dict] = None
    write_paths: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        cfg.validate()
        return cfg

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        num = (int, float)
        for name in ("alpha", "m0", "h_a", "h_b", "g_ab", "g_ba", "beta", "birth", "u_const", "perturb", "u_max",
                     "horizon", "dt", "t_max", "damping", "tol", "smp_tol", "stationarity_tol"):
            v = getattr(self, name)
            need(isinstance(v, num) and not isinstance(v, bool) and np.isfinite(v), f"{name} must be a finite number")
        for name in ("a", "b", "n_max", "x0", "cells", "n_paths", "seed", "max_iters", "max_rounds", "write_paths"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool), f"{name} must be an integer")
        need(self.problem in PROBLEMS, f"problem must be one of {PROBLEMS}")
        need(self.control in CONTROLS, f"control must be one of {CONTROLS}")
        need(self.mean_method in ("ode", "mc"), "mean_method must be 'ode' or 'mc'")
        need(0 <= self.a < self.b, "need 0 <= a < b")
        need(self.alpha > 0 and self.g_ab > 0 and self.g_ba > 0, "alpha, g_ab, g_ba must be positive")
        need(self.h_b >= self.h_a, "need h_b >= h_a")
        need(self.beta >= 0 and self.birth >= 0, "beta and birth must be nonnegative")
        need(self.n_max >= 1 and 0 <= self.x0 <= self.n_max, "need n_max >= 1 and 0 <= x0 <= n_max")
        need(self.horizon > 0 and self.dt > 0 and self.t_max >= 0, "horizon, dt must be positive, t_max >= 0")
        need(self.cells >= 1 and self.n_paths >= 2, "need cells >= 1 and n_paths >= 2")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(0 < self.damping <= 1 and self.tol > 0 and self.smp_tol > 0, "damping in (0,1], tolerances positive")
        need(self.max_iters >= 1 and self.max_rounds >= 1, "iteration budgets must be positive")
        need(self.u_max > 0 and self.write_paths >= 0, "u_max positive, write_paths nonnegative")
        if self.problem == "ex2":
            need(self.a <= self.m0 <= self.b, "m0 must lie in [a, b] for the two-state chain")
        if self.problem == "custom":
            need(self.states is not None and self.g_rates is not None, "custom problems need states and g_rates")
        if self.table is not None:
            need(isinstance(self.table, dict), "table must be an object")
            extra = set(self.table) - {"a", "b", "alpha", "m0"}
            need(not extra, f"unknown table keys: {sorted(extra)}")
            for k in ("a", "b", "alpha", "m0"):
                v = self.table.get(k, [])
                need(isinstance(v, list) and all(isinstance(z, (int, float)) for z in v), f"table.{k} must be a list")


# --- problem assembly ---

@dataclass
class Setup:
    problem: ControlProblem
    control: chain.Control
    closed_form: Optional[chain.Control]
    mean: Optional[MeanCurve]
    info: dict = field(default_factory=dict)


def _two_state(cfg: RunConfig) -> examples.TwoStateSpec:
    return examples.TwoStateSpec(cfg.a, cfg.b, cfg.alpha, cfg.h_a, cfg.h_b, cfg.g_ab, cfg.g_ba, cfg.u_max)


def _custom_problem(cfg: RunConfig) -> ControlProblem:
    try:
        G = chain.validate_generator(cfg.g_rates, cfg.states, strict_positive=False)
        lam = np.asarray(cfg.rates if cfg.rates is not None else cfg.g_rates, dtype=float)
        lam = chain.validate_generator(lam, cfg.states).rates
    except (MfsmpError, ValueError) as e:
        raise ConfigError(f"custom generator: {e}") from e
    off = lam - np.diag(np.diag(lam))
    intensity = chain.Intensity(G.states, lambda t, x, m, u: off[x], float(off.sum(axis=1).max(initial=0.0)),
                                time_homogeneous=True, name="custom")
    st = G.states.astype(float)
    spec = cost.CostSpec(terminal=lambda x, m: st[x])
    x0 = cfg.x0 if cfg.x0 in [int(s) for s in G.states] else int(G.states[0])
    return ControlProblem(intensity, G, spec, chain.initial_law(G.states, x0), cfg.horizon, name="custom")


def build(cfg: RunConfig) -> Setup:
    """Problem, control under study, its closed form (if any) and the mean curve it induces."""
    info: dict = {}
    closed = None
    riccati = None
    if cfg.problem == "ex1":
        spec = _two_state(cfg)
        problem = examples.ex1_problem(spec, cfg.horizon)
        closed = examples.ex1_control(spec)
    elif cfg.problem == "ex2":
        spec = _two_state(cfg)
        problem = examples.ex2_problem(spec, cfg.horizon, cfg.m0)
        params = examples.ex2_riccati_coeffs(cfg.a, cfg.b, cfg.alpha, cfg.m0)
        try:
            riccati = examples.riccati_mean_curve(params, cfg.horizon, cfg.cells, cfg.dt)
            closed = examples.ex2_control(spec, riccati)
        except ValueError as e:
            info["riccati"] = str(e)
    elif cfg.problem == "schlogl":
        spec = examples.SchloglSpec(cfg.n_max, cfg.beta, cfg.birth, x0=cfg.x0, u_max=cfg.u_max)
        problem = examples.ex3_problem(spec, cfg.horizon)
        closed = examples.ex3_control(spec)
    else:
        problem = _custom_problem(cfg)
    if riccati is not None:
        info["riccati_curve"] = riccati

    grid = uniform_grid(cfg.horizon, cfg.cells)
    S = problem.G.size
    if cfg.control == "constant":
        control = chain.FeedbackControl(np.full(S, cfg.u_const))
    elif cfg.control == "closed_form":
        if closed is None:
            raise ConfigError(f"no closed-form control for problem {cfg.problem}")
        control = closed
    else:
        smp_cfg = adjoint.SMPConfig(cfg.max_rounds, cfg.smp_tol, 1.0, cfg.cells, cfg.mean_method,
                                    _fixed_point(cfg), cfg.seed)
        try:
            res = adjoint.solve_smp(problem, smp_cfg, initial=closed)
            info["smp"] = {"rounds": res.rounds, "change": res.change, "converged": True}
        except NoConvergence as e:
            res = e.best
            info["smp"] = {"rounds": e.iterations, "change": e.residual, "converged": False}
        info["smp_result"] = res
        control = res.control
    if cfg.perturb != 0.0:
        base = cost.tabulate_control(control, grid, S)
        control = chain.TabulatedControl(grid, base.table + cfg.perturb)
    mean = None
    if problem.intensity.uses_mean:
        mean = adjoint.control_law(problem, control, cfg.cells, "ode").mean
    return Setup(problem, control, closed, mean, info)


def _fixed_point(cfg: RunConfig):
    from .meanfield import FixedPointConfig

    return FixedPointConfig(cfg.max_iters, cfg.damping, cfg.tol, cfg.n_paths, cfg.cells)


# --- artifact writing ---

class Artifacts:
    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def write(self, name: str, text: str):
        (self.out / name).write_text(text)
        self.files.append(name)

    def json(self, name: str, obj):
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def manifest(self):
        entries = [{"path": f, "sha256": hashlib.sha256((self.out / f).read_bytes()).hexdigest()}
                   for f in sorted(self.files)]
        (self.out / "manifest.json").write_text(json.dumps({"artifacts": entries}, indent=2) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _control_csv(control: chain.Control, grid: np.ndarray, states: np.ndarray) -> str:
    tab = cost.tabulate_control(control, grid, len(states)).table
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_start", "t_end", "state", "u"])
    for k in range(len(grid) - 1):
        for i, s in enumerate(states):
            w.writerow([format(grid[k], ".17g"), format(grid[k + 1], ".17g"), int(s), format(tab[k, i], ".17g")])
    return buf.getvalue()


# --- subcommands ---

def cmd_riccati_table(cfg: RunConfig, art: Artifacts) -> int:
    if cfg.table is None:
        rows = [(a, b, al, m0) for a, b, al, m0, _ in examples.published_table_rows()]
    else:
        t = cfg.table
        rows = [(a, b, al, m0) for a in t.get("a", []) for b in t.get("b", []) for al in t.get("alpha", [])
                for m0 in t.get("m0", [])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "b", "alpha", "m0", "exit_time"])
    for a, b, al, m0 in rows:
        try:
            params = examples.ex2_riccati_coeffs(a, b, al, m0)
        except ValueError as e:
            raise ConfigError(f"table row {(a, b, al, m0)}: {e}") from e
        _, e = examples.solve_constrained_riccati(params, cfg.dt, cfg.t_max)
        w.writerow([_num(a), _num(b), _num(al), _num(m0), "inf" if e is None else format(e, ".6f")])
    art.write("riccati_table.csv", buf.getvalue())
    return 0


def _num(x) -> str:
    return format(float(x), "g")


def cmd_simulate(cfg: RunConfig, art: Artifacts) -> int:
    st = build(cfg)
    pr = st.problem
    batch = chain.simulate_paths(pr.intensity, pr.law, pr.horizon, cfg.n_paths, cfg.seed, mean=st.mean,
                                 control=st.control)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "time", "state"])
    states = pr.G.states
    for p in range(min(cfg.write_paths, len(batch))):
        w.writerow([p, "0.0", int(states[batch.x0[p]])])
        lo, hi = batch.offsets[p], batch.offsets[p + 1]
        for t, j in zip(batch.times[lo:hi], batch.to_idx[lo:hi]):
            w.writerow([p, format(float(t), ".17g"), int(states[j])])
    art.write("paths.csv", buf.getvalue())
    if len(batch):
        art.write("path_0.csv", batch.path(0).to_csv())
    xT = states[batch.final_idx()].astype(float)
    dist = np.bincount(batch.final_idx(), minlength=len(states)) / len(batch)
    art.json("summary.json", {
        "n_paths": len(batch), "mean_events": float(batch.n_events.mean()),
        "mean_terminal_state": float(xT.mean()),
        "terminal_distribution": {str(int(s)): float(d) for s, d in zip(states, dist)},
        "max_representation_residual": int(np.max(np.abs(chain.batch_representation_residual(batch)))),
    })
    if st.mean is not None:
        art.write("mean.csv", st.mean.to_csv())
    return 0


def _cost_pair(cfg: RunConfig, st: Setup) -> dict:
    pr = st.problem
    rw = cost.estimate_cost_reweighted(pr.cost, pr.intensity, pr.G, st.control, st.mean, pr.law, pr.horizon,
                                       cfg.n_paths, cfg.seed, cfg.cells)
    dr = cost.estimate_cost_direct(pr.cost, pr.intensity, st.control, st.mean, pr.law, pr.horizon, cfg.n_paths,
                                   cfg.seed + 1, cfg.cells)
    se = float(np.hypot(rw.se, dr.se))
    agree = bool(abs(rw.value - dr.value) <= 3 * se)
    return {"reweighted": rw.to_dict(), "direct": dr.to_dict(), "combined_se": se, "pass": agree}


def cmd_cost(cfg: RunConfig, art: Artifacts) -> int:
    st = build(cfg)
    out = _cost_pair(cfg, st)
    out["ode_value"] = adjoint.expected_cost_ode(st.problem, st.control, cfg.cells)
    art.json("cost.json", out)
    return 0


def cmd_validate(cfg: RunConfig, art: Artifacts) -> int:
    st = build(cfg)
    pr = st.problem
    G = pr.G
    checks: dict = {}
    mart = girsanov.martingale_checks(pr.intensity, G, pr.law, pr.horizon, cfg.n_paths, cfg.seed,
                                      control=st.control, mean=st.mean, cells=cfg.cells)
    checks["measure_change"] = {**mart.to_dict(), "pass": mart.passed}

    ref = chain.simulate_paths(chain.constant_intensity(G), pr.law, pr.horizon, cfg.n_paths, cfg.seed + 2)
    resid = chain.batch_representation_residual(ref)
    checks["representation"] = {"max_abs": int(np.max(np.abs(resid))), "pass": bool(np.all(resid == 0))}
    opt, pred = chain.batch_optional_variation(ref, G)
    m, s = girsanov.mean_se(opt - pred)
    checks["quadratic_variation"] = {"mean_diff": m, "se": s, "pass": bool(abs(m) <= 3 * s)}
    dyn = []
    fs = [("identity", G.states.astype(float))] + [(f"indicator_{int(x)}", (G.states == x).astype(float))
                                                     for x in G.states]
    for name, fv in fs:
        m, s = girsanov.mean_se(chain.batch_dynkin_residual(ref, G, fv))
        dyn.append({"f": name, "mean": m, "se": s, "pass": bool(abs(m) <= 3 * s or s == 0 and m == 0)})
    checks["dynkin"] = {"functions": dyn, "pass": all(d["pass"] for d in dyn)}
    checks["cost_estimators"] = _cost_pair(cfg, st)

    if pr.cost.running is not None:
        fld, inputs = adjoint.adjoint_for_control(pr, st.control, cfg.cells, "ode")
        sample = chain.simulate_paths(pr.intensity, pr.law, pr.horizon, min(cfg.n_paths, 2000), cfg.seed + 3,
                                      mean=inputs.mean, control=st.control)
        rep = adjoint.check_stationarity(fld, pr, st.control, sample, inputs.mean, inputs.mean_f,
                                         tol=cfg.stationarity_tol)
        checks["stationarity"] = {**rep.to_dict(), "pass": rep.passed, "control": cfg.control}
    passed = all(c["pass"] for c in checks.values())
    art.json("validate.json", {"problem": cfg.problem, "seed": cfg.seed, "n_paths": cfg.n_paths, "pass": passed,
                               "checks": checks})
    return 0 if passed else 1


def cmd_solve(cfg: RunConfig, art: Artifacts) -> int:
    cfg = dataclasses.replace(cfg, control="smp", perturb=0.0)
    st = build(cfg)
    res: adjoint.SMPResult = st.info["smp_result"]
    pr = st.problem
    grid = res.field.grid
    art.write("adjoint.csv", res.field.to_csv())
    art.write("control.csv", _control_csv(res.control, grid, pr.G.states))
    law = res.inputs.law
    mean_curve = res.inputs.mean or MeanCurve(grid, law @ pr.G.states.astype(float))
    art.write("mean.csv", mean_curve.to_csv())
    tab = res.control.table
    summary = {"problem": cfg.problem, **st.info["smp"],
               "control_min": float(tab.min()), "control_max": float(tab.max()),
               "cost_ode": adjoint.expected_cost_ode(pr, res.control, cfg.cells)}
    if st.closed_form is not None:
        closed_tab = cost.tabulate_control(st.closed_form, grid, pr.G.size).table
        summary["closed_form_max_delta"] = float(np.max(np.abs(tab - closed_tab)))
        summary["closed_form_cost_ode"] = adjoint.expected_cost_ode(pr, st.closed_form, cfg.cells)
    if "riccati_curve" in st.info:
        ric = st.info["riccati_curve"]
        summary["riccati_mean_max_delta"] = float(np.max(np.abs(mean_curve.values - ric.values)))
    if "riccati" in st.info:
        summary["riccati"] = st.info["riccati"]
    art.json("control.json", summary)
    return 0 if st.info["smp"]["converged"] else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "riccati-table": cmd_riccati_table,
    "solve": cmd_solve,
    "cost": cmd_cost,
}


def load_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from e
    if seed is not None:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = {**data, "seed": seed}
    return RunConfig.from_dict(data)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="mfsmp", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=_u64, help="overrides the config seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    art = Artifacts(Path(args.out))
    try:
        code = COMMANDS[args.command](cfg, art)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NoConvergence as e:
        print(f"no convergence: {e}", file=sys.stderr)
        code = 1
    finally:
        art.manifest()
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
