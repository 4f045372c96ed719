"""Monte-Carlo estimation of the mean-field cost functional.

Two estimators are provided. The reweighted one simulates under the reference
generator and weights with the density process,

    J(u) = E[ int_0^T L(t) f(t, x, E[L(t) kappa_f(x(t))], u) dt + L(T) h(x(T), E[L(T) kappa_h(x(T))]) ],

with inner means estimated on the same sample. The direct one simulates under
the controlled intensities with a supplied mean curve plugged in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import Control, GeneratorMatrix, InitialLaw, Intensity, PathBatch, TabulatedControl, simulate_paths
from .errors import InadmissiblePerturbation, InsufficientPaths
from .girsanov import mean_se, sweep, uniform_grid
from .meanfield import FixedPointConfig, MeanCurve, _kappa_vector, reference_sample, solve_mean_fixed_point

# (t, state_idx, m_f, u) -> running cost rate; arrays of shape (n,)
RunningCost = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# (state_idx, m_h) -> terminal cost
TerminalCost = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class CostSpec:
    """Running and terminal costs with their mean functionals.

    ``kappa_f``/``kappa_h`` are per-state vectors (or callables on state
    values); None means the corresponding cost has no mean argument.
    ``time_homogeneous`` declares that ``running`` has no explicit time
    dependence, which lets sweeps tabulate it per grid cell.
    """

    running: Optional[RunningCost] = None
    terminal: Optional[TerminalCost] = None
    kappa_f: object = None
    kappa_h: object = None
    time_homogeneous: bool = True


@dataclass(frozen=True)
class CostEstimate:
    value: float
    se: float
    n_paths: int
    estimator: str

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "n_paths": self.n_paths, "estimator": self.estimator}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _running_for_sweep(spec: CostSpec, mean_f: Optional[MeanCurve]):
    if spec.running is None:
        return None

    def run(t, x, u):
        m = mean_f.left(t) if mean_f is not None else np.full(len(t), np.nan)
        return spec.running(t, x, m, u)

    return run


def _terminal_values(spec: CostSpec, xT: np.ndarray, m_h: float) -> np.ndarray:
    if spec.terminal is None:
        return np.zeros(len(xT))
    return np.broadcast_to(np.asarray(spec.terminal(xT, m_h), dtype=float), (len(xT),))


def reweighted_samples(spec: CostSpec, intensity: Intensity, G: GeneratorMatrix, control: Optional[Control],
                       mean: Optional[MeanCurve], batch: PathBatch, cells: int = 256,
                       threads: int | None = None) -> np.ndarray:
    """Per-path terms ``int L f dt + L(T) h`` of the reweighted estimator."""
    grid = uniform_grid(batch.horizon, cells)
    mean_f, m_h = None, float("nan")
    if spec.kappa_f is not None or spec.kappa_h is not None:
        first = sweep(batch, grid, intensity, G, mean, control, threads=threads)
        L = first.density
        if spec.kappa_f is not None:
            kf = _kappa_vector(spec.kappa_f, G.states)
            mean_f = MeanCurve(grid, (L * kf[first.grid_idx]).mean(axis=0), "kappa_f")
        if spec.kappa_h is not None:
            kh = _kappa_vector(spec.kappa_h, G.states)
            m_h = float(np.mean(L[:, -1] * kh[first.grid_idx[:, -1]]))
    res = sweep(batch, grid, intensity, G, mean, control, running=_running_for_sweep(spec, mean_f),
                threads=threads, running_cellwise=spec.time_homogeneous)
    return res.running + res.terminal_density * _terminal_values(spec, res.grid_idx[:, -1], m_h)


def estimate_cost_reweighted(spec: CostSpec, intensity: Intensity, G: GeneratorMatrix, control: Optional[Control],
                             mean: Optional[MeanCurve], law: InitialLaw, horizon: float, n: int, seed: int,
                             cells: int = 256, batch: Optional[PathBatch] = None,
                             threads: int | None = None) -> CostEstimate:
    """Importance-sampling estimate under the reference measure.

    The standard error covers the outer sample only; inner means carry an
    O(N^-1/2) bias.
    """
    if n < 2:
        raise InsufficientPaths("at least two paths are needed for a standard error")
    if batch is None:
        batch = reference_sample(G, law, horizon, n, seed, threads)
    v, s = mean_se(reweighted_samples(spec, intensity, G, control, mean, batch, cells, threads))
    return CostEstimate(v, s, len(batch), "reweighted")


def estimate_cost_direct(spec: CostSpec, intensity: Intensity, control: Optional[Control],
                         mean: Optional[MeanCurve], law: InitialLaw, horizon: float, n: int, seed: int,
                         cells: int = 256, mean_f: Optional[MeanCurve] = None, m_h: Optional[float] = None,
                         threads: int | None = None) -> CostEstimate:
    """Plain Monte Carlo under the controlled intensities.

    Mean arguments of the costs come from ``mean`` unless ``mean_f``/``m_h``
    override them; nothing is re-estimated from the sample.
    """
    if n < 2:
        raise InsufficientPaths("at least two paths are needed for a standard error")
    if intensity.uses_mean and mean is None:
        raise ValueError("a mean-dependent intensity needs a mean curve")
    batch = simulate_paths(intensity, law, horizon, n, seed, mean=mean, control=control, threads=threads)
    grid = uniform_grid(horizon, cells)
    if mean_f is None:
        mean_f = mean
    if m_h is None:
        m_h = float(mean.values[-1]) if mean is not None else float("nan")
    res = sweep(batch, grid, control=control, running=_running_for_sweep(spec, mean_f), threads=threads,
                running_cellwise=spec.time_homogeneous)
    v, s = mean_se(res.running + _terminal_values(spec, res.grid_idx[:, -1], m_h))
    return CostEstimate(v, s, len(batch), "direct")


# --- local optimality probes ---

Direction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def canned_directions(horizon: float, state_idx: int, c: float = 0.1) -> list[tuple[str, Direction]]:
    """Eight perturbations acting on one state: c * {+-1, +-t/T, +-(1 - t/T), +-sin(pi t/T)}."""
    shapes = {
        "const": lambda t: np.ones_like(t),
        "ramp_up": lambda t: t / horizon,
        "ramp_down": lambda t: 1.0 - t / horizon,
        "sine": lambda t: np.sin(np.pi * t / horizon),
    }
    out = []
    for name, fn in shapes.items():
        for sign, tag in ((1.0, "+"), (-1.0, "-")):
            def d(t, x, fn=fn, sign=sign):
                t = np.asarray(t, dtype=float)
                return np.where(np.asarray(x) == state_idx, sign * c * fn(t), 0.0)
            out.append((tag + name, d))
    return out


def tabulate_control(control: Optional[Control], grid: np.ndarray, S: int,
                     direction: Optional[Direction] = None, eps: float = 0.0) -> TabulatedControl:
    """Step control on ``grid`` with cell values taken at cell midpoints."""
    K = len(grid) - 1
    mid = np.repeat(0.5 * (grid[:-1] + grid[1:]), S)
    xs = np.tile(np.arange(S), K)
    base = control(mid, xs) if control is not None else np.zeros(len(mid))
    table = np.asarray(base, dtype=float).copy()
    if direction is not None and eps != 0.0:
        table = table + eps * np.asarray(direction(mid, xs), dtype=float)
    return TabulatedControl(grid, table.reshape(K, S))


@dataclass
class ProbeReport:
    base_value: float
    base_se: float
    differences: list  # [{name, diff, se, ok}]

    @property
    def fraction_ok(self) -> float:
        if not self.differences:
            return 1.0
        return sum(d["ok"] for d in self.differences) / len(self.differences)

    @property
    def passed(self) -> bool:
        return all(d["ok"] for d in self.differences)

    def to_dict(self) -> dict:
        return {"base_value": self.base_value, "base_se": self.base_se, "fraction_ok": self.fraction_ok,
                "differences": self.differences}


def _check_admissible(intensity: Intensity, control: TabulatedControl, mean: Optional[MeanCurve],
                      bounds: tuple[float, float]):
    lo, hi = bounds
    tab = control.table
    if np.any(tab < lo - 1e-12) or np.any(tab > hi + 1e-12):
        raise InadmissiblePerturbation(f"perturbed control leaves [{lo}, {hi}]")
    grid = control.grid
    K, S = tab.shape
    mid = np.repeat(0.5 * (grid[:-1] + grid[1:]), S)
    xs = np.tile(np.arange(S), K)
    m = mean.left(mid) if mean is not None else None
    r = intensity.evaluate(mid, xs, m, tab.reshape(-1))
    if np.any(r < 0):
        raise InadmissiblePerturbation("perturbed control makes a rate negative")


def perturbation_probe(spec: CostSpec, intensity: Intensity, G: GeneratorMatrix, control: Optional[Control],
                       directions: Sequence[tuple[str, Direction]], eps: float, law: InitialLaw, horizon: float,
                       n: int, seed: int, cells: int = 256, bounds: tuple[float, float] = (0.0, np.inf),
                       kappa=None, mean: Optional[MeanCurve] = None, fixed_point: Optional[FixedPointConfig] = None,
                       threads: int | None = None) -> ProbeReport:
    """Common-random-numbers estimates of J(u + eps d) - J(u).

    Every control is evaluated on one reference sample. For mean-dependent
    intensities the mean curve of each control is re-solved (on the same
    sample) unless the intensity is mean-free; ``mean`` seeds the iteration.
    """
    if n < 2:
        raise InsufficientPaths("at least two paths are needed for a standard error")
    batch = reference_sample(G, law, horizon, n, seed, threads)
    grid = uniform_grid(horizon, cells)
    S = G.size
    cfg = fixed_point or FixedPointConfig(n_paths=n, cells=cells)

    def evaluate(ctrl: TabulatedControl) -> tuple[np.ndarray, Optional[MeanCurve]]:
        m = None
        if intensity.uses_mean:
            if kappa is None:
                raise ValueError("a mean-dependent intensity needs kappa")
            m = solve_mean_fixed_point(intensity, G, ctrl, kappa, law, horizon, cfg, seed, initial=mean,
                                       batch=batch, threads=threads).curve
        return reweighted_samples(spec, intensity, G, ctrl, m, batch, cells, threads), m

    base_ctrl = tabulate_control(control, grid, S)
    base, base_mean = evaluate(base_ctrl)
    bv, bs = mean_se(base)
    diffs = []
    for name, d in directions:
        ctrl = tabulate_control(control, grid, S, d, eps)
        _check_admissible(intensity, ctrl, base_mean, bounds)
        if eps == 0.0:
            diffs.append({"name": name, "diff": 0.0, "se": 0.0, "ok": True})
            continue
        vals, _ = evaluate(ctrl)
        dm, ds = mean_se(vals - base)
        diffs.append({"name": name, "diff": dm, "se": ds, "ok": bool(dm >= -3 * ds)})
    return ProbeReport(bv, bs, diffs)
