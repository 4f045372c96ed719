"""Mean-field consistency: curves mu(t) = E^u[kappa(x(t))] that agree with the
intensities they are plugged into.

Two routes are provided. The Monte-Carlo route reweights reference paths with
the density process (damped Picard iteration on the curve). The Kolmogorov
route integrates the forward equation for the marginal law, with the mean
read off the law itself, and is exact up to time stepping on finite chains.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .chain import Control, GeneratorMatrix, InitialLaw, Intensity, PathBatch, constant_intensity, simulate_paths
from .errors import NoConvergence
from .girsanov import sweep, uniform_grid


@dataclass(frozen=True)
class MeanCurve:
    """Values on a uniform grid, read as a left-continuous step function.

    ``left(t)`` returns the value of the cell ``(t_k, t_{k+1}]`` containing
    ``t`` (the value at ``t_k``), which is what a predictable intensity sees at
    ``t-``; ``interp(t)`` is the linear interpolant.
    """

    grid: np.ndarray
    values: np.ndarray
    kappa_tag: str = "identity"
    se: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.grid) != len(self.values) or len(self.grid) < 2:
            raise ValueError("grid and values must have equal length >= 2")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mean curve values must be finite")

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def left(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.grid, t, side="left") - 1, 0, len(self.grid) - 2)
        return self.values[k]

    def interp(self, t) -> np.ndarray:
        return np.interp(t, self.grid, self.values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mu"])
        for t, v in zip(self.grid, self.values):
            w.writerow([format(float(t), ".17g"), format(float(v), ".17g")])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kappa_tag: str = "identity") -> "MeanCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["t", "mu"]:
            raise ValueError("expected header 't,mu'")
        arr = np.array([[float(a), float(b)] for a, b in rows[1:]])
        return cls(arr[:, 0], arr[:, 1], kappa_tag)

    @classmethod
    def constant(cls, horizon: float, cells: int, value: float, kappa_tag: str = "identity") -> "MeanCurve":
        g = uniform_grid(horizon, cells)
        return cls(g, np.full(len(g), float(value)), kappa_tag)


@dataclass(frozen=True)
class FixedPointConfig:
    max_iters: int = 50
    damping: float = 0.5
    tol: float = 0.02
    n_paths: int = 10_000
    cells: int = 256

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1 or self.n_paths < 2 or self.cells < 1:
            raise ValueError("max_iters >= 1, n_paths >= 2 and cells >= 1 required")


def _kappa_vector(kappa, states) -> np.ndarray:
    if callable(kappa):
        return np.array([float(kappa(int(s))) for s in states])
    return np.asarray(kappa, dtype=float)


def reference_sample(G: GeneratorMatrix, law: InitialLaw, horizon: float, n: int, seed: int,
                     threads: int | None = None) -> PathBatch:
    return simulate_paths(constant_intensity(G), law, horizon, n, seed, threads=threads)


def estimate_mean_curve(intensity: Intensity, G: GeneratorMatrix, control: Optional[Control],
                        mean_in: Optional[MeanCurve], kappa, law: InitialLaw, horizon: float, n: int,
                        seed: int, cells: Optional[int] = None, batch: Optional[PathBatch] = None,
                        kappa_tag: str = "identity", threads: int | None = None) -> MeanCurve:
    """One reweighting pass: sample means of L^u(t_k) kappa(x(t_k)) under P.

    ``mean_in`` is plugged into the intensities; ``batch`` reuses an existing
    reference sample (common random numbers across calls).
    """
    if cells is None:
        cells = len(mean_in.grid) - 1 if mean_in is not None else 256
    grid = uniform_grid(horizon, cells)
    if batch is None:
        batch = reference_sample(G, law, horizon, n, seed, threads)
    kv = _kappa_vector(kappa, G.states)
    res = sweep(batch, grid, intensity, G, mean_in, control, threads=threads)
    vals = res.density * kv[res.grid_idx]
    means = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(batch)) if len(batch) > 1 else np.zeros_like(means)
    return MeanCurve(grid, means, kappa_tag, se)


def estimate_law(intensity: Intensity, G: GeneratorMatrix, control: Optional[Control],
                 mean_in: Optional[MeanCurve], batch: PathBatch, cells: int,
                 threads: int | None = None) -> np.ndarray:
    """(K+1, S) reweighted marginal law E[L^u(t_k) 1{x(t_k) = i}]."""
    grid = uniform_grid(batch.horizon, cells)
    res = sweep(batch, grid, intensity, G, mean_in, control, threads=threads)
    S = G.size
    L = res.density
    out = np.zeros((len(grid), S))
    for i in range(S):
        out[:, i] = (L * (res.grid_idx == i)).mean(axis=0)
    return out


@dataclass
class FixedPointResult:
    curve: MeanCurve
    iterations: int
    residual: float


def solve_mean_fixed_point(intensity: Intensity, G: GeneratorMatrix, control: Optional[Control], kappa,
                           law: InitialLaw, horizon: float, cfg: FixedPointConfig, seed: int,
                           initial: Optional[MeanCurve] = None, batch: Optional[PathBatch] = None,
                           kappa_tag: str = "identity", threads: int | None = None) -> FixedPointResult:
    """Damped Picard iteration mu <- (1 - theta) mu + theta * estimate(mu).

    All iterations reuse one reference sample, so the map being iterated is
    deterministic. Stops once the sup-norm change is at most
    ``tol + 3 * max pointwise SE``; raises :class:`NoConvergence` carrying the
    best iterate otherwise.
    """
    if batch is None:
        batch = reference_sample(G, law, horizon, cfg.n_paths, seed, threads)
    kv = _kappa_vector(kappa, G.states)
    grid = uniform_grid(horizon, cfg.cells)
    if initial is None:
        start = float(law.vector(G.size) @ kv)
        mu = MeanCurve(grid, np.full(len(grid), start), kappa_tag)
    else:
        mu = MeanCurve(grid, np.interp(grid, initial.grid, initial.values), kappa_tag)
    best, best_res = mu, np.inf
    for it in range(1, cfg.max_iters + 1):
        est = estimate_mean_curve(intensity, G, control, mu, kv, law, horizon, cfg.n_paths, seed,
                                  cfg.cells, batch, kappa_tag, threads)
        change = float(np.max(np.abs(est.values - mu.values)))
        new = MeanCurve(grid, (1 - cfg.damping) * mu.values + cfg.damping * est.values, kappa_tag, est.se)
        if change < best_res:
            best, best_res = new, change
        if change <= cfg.tol + 3 * float(np.max(est.se)):
            # the estimate itself is the consistent curve to within noise
            return FixedPointResult(MeanCurve(grid, est.values, kappa_tag, est.se), it, change)
        mu = new
        if not intensity.uses_mean:
            return FixedPointResult(MeanCurve(grid, est.values, kappa_tag, est.se), it, 0.0)
    raise NoConvergence(f"mean fixed point not reached in {cfg.max_iters} iterations (residual {best_res:.3g})",
                        best=FixedPointResult(best, cfg.max_iters, best_res), iterations=cfg.max_iters,
                        residual=best_res)


def _generator_at(intensity: Intensity, control: Optional[Control], t: float, m: float,
                  t_control: Optional[float] = None) -> np.ndarray:
    S = len(intensity.states)
    idx = np.arange(S)
    tt = np.full(S, t)
    u = control(np.full(S, t if t_control is None else t_control), idx) if control is not None else None
    r = intensity.evaluate(tt, idx, np.full(S, m), u)
    r[idx, idx] = -r.sum(axis=1)
    return r


@dataclass
class LawPath:
    grid: np.ndarray
    law: np.ndarray  # (K+1, S)
    mean: MeanCurve


def forward_law(intensity: Intensity, control: Optional[Control], kappa, law: InitialLaw, horizon: float,
                cells: int = 256, substeps: int = 4, mean: Optional[Callable[[float], float]] = None,
                kappa_tag: str = "identity") -> LawPath:
    """RK4 integration of d pi/dt = pi Q(t) on a finite chain.

    Controls are read at each cell midpoint, so step controls on the same
    grid enter with their own cell value at every stage. When ``mean`` is None the intensity is fed ``sum_i pi_i kappa(i)`` at each
    stage, i.e. the McKean-Vlasov forward equation is solved directly;
    otherwise the given function of time is plugged in.
    """
    states = intensity.states
    kv = _kappa_vector(kappa, states)
    grid = uniform_grid(horizon, cells)
    pi = law.vector(len(states))
    out = np.empty((len(grid), len(states)))
    out[0] = pi

    def rhs(t, p, tc):
        m = float(p @ kv) if mean is None else float(mean(t))
        return p @ _generator_at(intensity, control, t, m, tc)

    for k in range(cells):
        h = (grid[k + 1] - grid[k]) / substeps
        t = grid[k]
        tc = 0.5 * (grid[k] + grid[k + 1])
        for _ in range(substeps):
            k1 = rhs(t, pi, tc)
            k2 = rhs(t + h / 2, pi + h / 2 * k1, tc)
            k3 = rhs(t + h / 2, pi + h / 2 * k2, tc)
            k4 = rhs(t + h, pi + h * k3, tc)
            pi = pi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out[k + 1] = pi
    return LawPath(grid, out, MeanCurve(grid, out @ kv, kappa_tag))


def rescale(curve: MeanCurve, cells: int) -> MeanCurve:
    grid = uniform_grid(curve.horizon, cells)
    return replace(curve, grid=grid, values=np.interp(grid, curve.grid, curve.values), se=None)
