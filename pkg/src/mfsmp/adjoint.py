"""Adjoint equation, Hamiltonian and the stochastic maximum principle.

In the Markovian case the adjoint pair is carried by a state-indexed field:
p(t) = phi(t, x(t)) and q_ij(t) = phi(t, j) - phi(t, i). Writing the adjoint
equation as dp = -F dt + sum q_ij dM_ij with M_ij = N_ij - int g_ij I_i ds the
compensated counts of the reference chain, Ito's formula for phi(t, x(t))
gives the backward system

    d phi_i / dt = -F_i(t, q) - sum_j g_ij q_ij,   phi(T) = terminal.

A driver supplies F, the dt-coefficient of the adjoint equation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .chain import Control, GeneratorMatrix, PathBatch, TabulatedControl
from .cost import tabulate_control
from .errors import EmptyControlSet, NoConvergence, NonFiniteField
from .girsanov import uniform_grid
from .meanfield import (
    FixedPointConfig,
    MeanCurve,
    _kappa_vector,
    estimate_law,
    forward_law,
    reference_sample,
    solve_mean_fixed_point,
)
from .problem import ControlProblem

U_CAP = 1e6  # stands in for an infinite upper control bound


def g_inner(m, n, G: GeneratorMatrix, i: int) -> float:
    """<m, n>_g at state index i: sum_{j != i} m_ij n_ij g_ij.

    ``m`` and ``n`` are full edge matrices or the rows at ``i``.
    """
    m = np.asarray(m, dtype=float)
    n = np.asarray(n, dtype=float)
    if m.ndim == 2:
        m = m[i]
    if n.ndim == 2:
        n = n[i]
    g = G.rates[i].copy()
    g[i] = 0.0
    return float(np.sum(m * n * g))


@dataclass(frozen=True)
class AdjointField:
    """phi(t_k, i) on an increasing grid; the sweep runs from t_K down to t_0."""

    grid: np.ndarray
    phi: np.ndarray  # (K+1, S)
    terminal: np.ndarray  # (S,)
    states: np.ndarray

    def q(self, k: int) -> np.ndarray:
        """(S, S) matrix q_ij = phi(t_k, j) - phi(t_k, i)."""
        row = self.phi[k]
        return row[None, :] - row[:, None]

    def q_cell(self, k: int) -> np.ndarray:
        """Average of q over the endpoints of cell k."""
        return 0.5 * (self.q(k) + self.q(k + 1))

    def q_edge(self, i: int, j: int) -> np.ndarray:
        """q_ij on the whole grid (state indices)."""
        return self.phi[:, j] - self.phi[:, i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state", "phi"])
        for k, t in enumerate(self.grid):
            for i, s in enumerate(self.states):
                w.writerow([format(float(t), ".17g"), int(s), format(float(self.phi[k, i]), ".17g")])
        return buf.getvalue()


@dataclass(frozen=True)
class DriverSpec:
    """``driver(t, k, phi)`` returns F_i for every state while t lies in cell k."""

    driver: Callable[[float, int, np.ndarray], np.ndarray]
    terminal: np.ndarray
    name: str = "custom"


def solve_adjoint_ode(spec: DriverSpec, G: GeneratorMatrix, grid: np.ndarray) -> AdjointField:
    """Backward classical RK4 with one step per grid cell."""
    grid = np.asarray(grid, dtype=float)
    K = len(grid) - 1
    terminal = np.asarray(spec.terminal, dtype=float)
    phi = np.empty((K + 1, G.size))
    phi[K] = terminal
    if not np.all(np.isfinite(terminal)):
        raise NonFiniteField("terminal values are not finite", float(grid[-1]))

    def rhs(t, k, y):
        return -np.asarray(spec.driver(t, k, y), dtype=float) - G.apply(y)

    y = terminal.copy()
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite steps are caught in the loop
        _backward_rk4(rhs, grid, y, phi)
    return AdjointField(grid, phi, terminal, G.states)


def _backward_rk4(rhs, grid, y, phi):
    for k in range(len(grid) - 2, -1, -1):
        t1, t0 = grid[k + 1], grid[k]
        h = t0 - t1
        k1 = rhs(t1, k, y)
        k2 = rhs(t1 + h / 2, k, y + h / 2 * k1)
        k3 = rhs(t1 + h / 2, k, y + h / 2 * k2)
        k4 = rhs(t0, k, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteField(f"adjoint field not finite at t={t0:.6g}", float(t0))
        phi[k] = y


# --- Hamiltonian ---

def _hamiltonian_batch(problem: ControlProblem, t: np.ndarray, x: np.ndarray, v: np.ndarray, q_rows: np.ndarray,
                       m: Optional[np.ndarray], m_f: Optional[np.ndarray]) -> np.ndarray:
    """sum_j (lambda_xj(v) - g_xj) q_xj - f(x, v) for arrays of equal length."""
    G = problem.G
    r = problem.intensity.evaluate(t, x, m, v)
    g = G.rates[x].copy()
    g[np.arange(len(x)), x] = 0.0
    val = np.sum((r - g) * q_rows, axis=1)
    if problem.cost.running is not None:
        mf = np.full(len(x), np.nan) if m_f is None else m_f
        val = val - np.asarray(problem.cost.running(t, x, mf, v), dtype=float)
    return val


def hamiltonian_value(problem: ControlProblem, t: float, state: int, v: float, q_row, m: Optional[float] = None,
                      m_f: Optional[float] = None, L: float = 1.0) -> float:
    """L * (<ell(v), q>_g - f(v)) at state index ``state``."""
    one = lambda z: None if z is None else np.array([float(z)])  # noqa: E731
    h = _hamiltonian_batch(problem, np.array([float(t)]), np.array([state]), np.array([float(v)]),
                           np.asarray(q_row, dtype=float)[None, :], one(m), one(m_f))
    return float(L * h[0])


def argmax_interval(H: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, tol: float = 1e-10,
                    scan: int = 201) -> float:
    """Maximizer of a vectorized H on [lo, hi], smallest one on ties.

    A quadratic fitted through three points and confirmed at a fourth is
    maximized in closed form; anything else gets a coarse scan refined by
    bounded Brent search.
    """
    if not (np.isfinite(lo) and lo <= hi) or np.isnan(hi):
        raise EmptyControlSet(f"control set [{lo}, {hi}] is empty or unbounded below")
    hi = min(hi, U_CAP)
    if hi == lo:
        return float(lo)
    s = min((hi - lo) / 2, 1.0)
    pts = np.array([lo, lo + s, lo + 2 * s, lo + 0.6180339887 * (hi - lo)])
    vals = np.asarray(H(pts), dtype=float)
    c2 = (vals[2] - 2 * vals[1] + vals[0]) / (2 * s * s)
    c1 = (vals[1] - vals[0]) / s - c2 * (2 * lo + s)
    c0 = vals[0] - c1 * lo - c2 * lo * lo
    fit = c0 + c1 * pts[3] + c2 * pts[3] ** 2
    scale = max(1.0, np.max(np.abs(vals)))
    if abs(fit - vals[3]) <= 1e-9 * scale:
        if c2 < -1e-14 * scale / max(s * s, 1e-300):
            return float(np.clip(-c1 / (2 * c2), lo, hi))
        ends = np.asarray(H(np.array([lo, hi])), dtype=float)
        return float(hi if ends[1] > ends[0] + 1e-12 * scale else lo)
    xs = np.linspace(lo, hi, scan)
    ys = np.asarray(H(xs), dtype=float)
    k = int(np.argmax(ys))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, scan - 1)]
    res = minimize_scalar(lambda v: -float(H(np.array([v]))[0]), bounds=(a, b), method="bounded",
                          options={"xatol": tol})
    best, fb = float(res.x), -float(res.fun)
    return float(xs[k]) if ys[k] >= fb else best


def maximize_hamiltonian(problem: ControlProblem, t: float, state: int, q_row, m: Optional[float] = None,
                         m_f: Optional[float] = None, bounds: Optional[tuple[float, float]] = None) -> float:
    lo, hi = bounds if bounds is not None else problem.bounds
    q_row = np.asarray(q_row, dtype=float)

    def H(v):
        n = len(v)
        return _hamiltonian_batch(problem, np.full(n, float(t)), np.full(n, state), v, np.tile(q_row, (n, 1)),
                                  None if m is None else np.full(n, float(m)),
                                  None if m_f is None else np.full(n, float(m_f)))

    return argmax_interval(H, lo, hi)


# --- stationarity ---

@dataclass
class StationarityReport:
    max_grad: float
    fraction_ok: float
    n_samples: int
    tol: float
    max_grad_by_state: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_grad <= self.tol

    def to_dict(self) -> dict:
        return {"max_grad": self.max_grad, "fraction_ok": self.fraction_ok, "n_samples": self.n_samples,
                "tol": self.tol, "passed": self.passed,
                "max_grad_by_state": {str(k): v for k, v in self.max_grad_by_state.items()}}


def hamiltonian_gradient_table(field_: AdjointField, problem: ControlProblem, control: Control,
                               mean: Optional[MeanCurve] = None, mean_f: Optional[MeanCurve] = None,
                               rel_step: float = 1e-6) -> np.ndarray:
    """(K, S) projected dH/dv at the control, per cell midpoint and state.

    The derivative is a central difference with step ``rel_step * max(1, |u|)``;
    at an active bound the outward part of the gradient is dropped (KKT).
    """
    grid = field_.grid
    K = len(grid) - 1
    S = field_.phi.shape[1]
    mid = np.repeat(0.5 * (grid[:-1] + grid[1:]), S)
    xs = np.tile(np.arange(S), K)
    u = np.asarray(control(mid, xs), dtype=float)
    pm = 0.5 * (field_.phi[:-1] + field_.phi[1:])  # cell averages, so q rows match q_cell
    q_rows = np.repeat(pm, S, axis=0) - pm.reshape(-1)[:, None]
    m = mean.left(mid) if mean is not None else None
    mf = mean_f.left(mid) if mean_f is not None else None
    step = rel_step * np.maximum(1.0, np.abs(u))
    up = _hamiltonian_batch(problem, mid, xs, u + step, q_rows, m, mf)
    dn = _hamiltonian_batch(problem, mid, xs, u - step, q_rows, m, mf)
    grad = (up - dn) / (2 * step)
    lo, hi = problem.bounds
    grad = np.where((u <= lo + 1e-12) & (grad < 0), 0.0, grad)
    grad = np.where((u >= hi - 1e-12) & (grad > 0), 0.0, grad)
    return grad.reshape(K, S)


def check_stationarity(field_: AdjointField, problem: ControlProblem, control: Control, batch: PathBatch,
                       mean: Optional[MeanCurve] = None, mean_f: Optional[MeanCurve] = None,
                       tol: float = 1e-6, rel_step: float = 1e-6) -> StationarityReport:
    """First-order condition dH/dv = 0 along paths, sampled at cell midpoints with x(t-)."""
    table = hamiltonian_gradient_table(field_, problem, control, mean, mean_f, rel_step)
    grid = field_.grid
    K = len(grid) - 1
    samples = []
    by_state: dict[int, float] = {}
    for k in range(K):
        x = batch.idx_at(0.5 * (grid[k] + grid[k + 1]), left=True)
        samples.append(np.abs(table[k, x]))
        for i in np.unique(x):
            s = int(field_.states[i])
            by_state[s] = max(by_state.get(s, 0.0), float(abs(table[k, i])))
    allg = np.concatenate(samples) if samples else np.zeros(0)
    max_g = float(allg.max()) if len(allg) else 0.0
    frac = float(np.mean(allg <= tol)) if len(allg) else 1.0
    return StationarityReport(max_g, frac, len(allg), tol, by_state)


# --- generic SMP driver and the coupled loop ---

@dataclass(frozen=True)
class LawInputs:
    """Marginal law on the adjoint grid and the mean curves derived from it."""

    grid: np.ndarray
    law: np.ndarray  # (K+1, S)
    mean: Optional[MeanCurve]  # enters the intensities
    mean_f: Optional[MeanCurve]  # enters the running cost
    m_h: float  # enters the terminal cost

    def law_at(self, t: float) -> np.ndarray:
        k = int(np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, len(self.grid) - 2))
        w = (t - self.grid[k]) / (self.grid[k + 1] - self.grid[k])
        return (1 - w) * self.law[k] + w * self.law[k + 1]


def law_inputs(problem: ControlProblem, grid: np.ndarray, law: np.ndarray, mean: Optional[MeanCurve]) -> LawInputs:
    st = problem.states
    mean_f = None
    m_h = float("nan")
    if problem.cost.kappa_f is not None:
        mean_f = MeanCurve(grid, law @ _kappa_vector(problem.cost.kappa_f, st), "kappa_f")
    if problem.cost.kappa_h is not None:
        m_h = float(law[-1] @ _kappa_vector(problem.cost.kappa_h, st))
    return LawInputs(grid, law, mean, mean_f, m_h)


def smp_driver(problem: ControlProblem, control: Control, inputs: LawInputs, dm: float = 1e-6) -> DriverSpec:
    """Driver of the adjoint equation for a given control and law.

    F_i = sum_j (lambda_ij - g_ij) q_ij - f_i
          + kappa(i) sum_l pi_l sum_j d lambda_lj/dm q_lj
          - kappa_f(i) sum_l pi_l d f_l/dm_f,
    terminal -h(i, m_h) - kappa_h(i) sum_l pi_l(T) dh(l, m_h)/dm_h.
    Mean derivatives are central differences with step ``dm``.
    """
    G = problem.G
    S = G.size
    grid = inputs.grid
    K = len(grid) - 1
    idx = np.arange(S)
    goff = G.rates - np.diag(np.diag(G.rates))
    mid = 0.5 * (grid[:-1] + grid[1:])
    intensity = problem.intensity
    cost = problem.cost
    kap = _kappa_vector(problem.kappa, problem.states) if problem.kappa is not None else np.zeros(S)
    kf = _kappa_vector(cost.kappa_f, problem.states) if cost.kappa_f is not None else np.zeros(S)
    kh = _kappa_vector(cost.kappa_h, problem.states) if cost.kappa_h is not None else np.zeros(S)

    R = np.empty((K, S, S))
    dR = np.zeros((K, S, S))
    f = np.zeros((K, S))
    df = np.zeros((K, S))
    for k in range(K):
        t = np.full(S, mid[k])
        u = np.asarray(control(t, idx), dtype=float)
        m = None if inputs.mean is None else np.full(S, float(inputs.mean.values[k]))
        R[k] = intensity.evaluate(t, idx, m, u)
        if intensity.uses_mean:
            dR[k] = (intensity.evaluate(t, idx, m + dm, u) - intensity.evaluate(t, idx, m - dm, u)) / (2 * dm)
        if cost.running is not None:
            mf = np.full(S, np.nan) if inputs.mean_f is None else np.full(S, float(inputs.mean_f.values[k]))
            f[k] = cost.running(t, idx, mf, u)
            if cost.kappa_f is not None:
                df[k] = (np.asarray(cost.running(t, idx, mf + dm, u)) - np.asarray(cost.running(t, idx, mf - dm, u))) / (2 * dm)
    Rg = R - goff[None]

    def driver(t, k, phi):
        q = phi[None, :] - phi[:, None]
        F = np.sum(Rg[k] * q, axis=1) - f[k]
        if intensity.uses_mean or cost.kappa_f is not None:
            pi = inputs.law_at(t)
            F = F + kap * float(pi @ np.sum(dR[k] * q, axis=1)) - kf * float(pi @ df[k])
        return F

    terminal = np.zeros(S)
    if cost.terminal is not None:
        terminal = -np.asarray(cost.terminal(idx, inputs.m_h), dtype=float)
        if cost.kappa_h is not None:
            dh = (np.asarray(cost.terminal(idx, inputs.m_h + dm), dtype=float)
                  - np.asarray(cost.terminal(idx, inputs.m_h - dm), dtype=float)) / (2 * dm)
            terminal = terminal - kh * float(inputs.law[-1] @ dh)
    return DriverSpec(driver, terminal, "smp")


@dataclass(frozen=True)
class SMPConfig:
    max_rounds: int = 50
    tol: float = 1e-3
    damping: float = 1.0
    cells: int = 256
    mean_method: str = "ode"  # or "mc"
    fixed_point: FixedPointConfig = FixedPointConfig()
    seed: int = 0

    def __post_init__(self):
        if self.mean_method not in ("ode", "mc"):
            raise ValueError("mean_method must be 'ode' or 'mc'")
        if not 0 < self.damping <= 1 or self.tol <= 0 or self.max_rounds < 1 or self.cells < 1:
            raise ValueError("invalid SMP configuration")


@dataclass
class SMPResult:
    control: TabulatedControl
    field: AdjointField
    inputs: LawInputs
    rounds: int
    change: float


def control_law(problem: ControlProblem, control: Control, cells: int, method: str = "ode",
                fixed_point: Optional[FixedPointConfig] = None, seed: int = 0,
                initial: Optional[MeanCurve] = None, batch: Optional[PathBatch] = None) -> LawInputs:
    """Marginal law of the controlled chain, mean-consistent when the intensity uses the mean."""
    grid = uniform_grid(problem.horizon, cells)
    kappa = problem.kappa if problem.kappa is not None else np.zeros(problem.G.size)
    if method == "ode":
        lp = forward_law(problem.intensity, control, kappa, problem.law, problem.horizon, cells)
        mean = lp.mean if problem.intensity.uses_mean else None
        return law_inputs(problem, grid, lp.law, mean)
    cfg = fixed_point or FixedPointConfig(cells=cells)
    if batch is None:
        batch = reference_sample(problem.G, problem.law, problem.horizon, cfg.n_paths, seed)
    mean = None
    if problem.intensity.uses_mean:
        mean = solve_mean_fixed_point(problem.intensity, problem.G, control, kappa, problem.law, problem.horizon,
                                      cfg, seed, initial=initial, batch=batch).curve
    law = estimate_law(problem.intensity, problem.G, control, mean, batch, cells)
    return law_inputs(problem, grid, law, mean)


def adjoint_for_control(problem: ControlProblem, control: Control, cells: int = 256, method: str = "ode",
                        **kw) -> tuple[AdjointField, LawInputs]:
    inputs = control_law(problem, control, cells, method, **kw)
    grid = uniform_grid(problem.horizon, cells)
    return solve_adjoint_ode(smp_driver(problem, control, inputs), problem.G, grid), inputs


def improve_control(problem: ControlProblem, field_: AdjointField, inputs: LawInputs) -> np.ndarray:
    """(K, S) Hamiltonian maximizers per cell and state."""
    grid = field_.grid
    K = len(grid) - 1
    S = problem.G.size
    out = np.empty((K, S))
    for k in range(K):
        t = 0.5 * (grid[k] + grid[k + 1])
        qc = field_.q_cell(k)
        m = None if inputs.mean is None else float(inputs.mean.values[k])
        mf = None if inputs.mean_f is None else float(inputs.mean_f.values[k])
        for i in range(S):
            out[k, i] = maximize_hamiltonian(problem, t, i, qc[i], m, mf)
    return out


def solve_smp(problem: ControlProblem, cfg: SMPConfig = SMPConfig(), initial: Optional[Control] = None) -> SMPResult:
    """Alternate law (mean fixed point), backward adjoint sweep and Hamiltonian maximization.

    Stops once the sup-norm control update is at most ``tol``; raises
    :class:`NoConvergence` with the last iterate otherwise.
    """
    grid = uniform_grid(problem.horizon, cfg.cells)
    S = problem.G.size
    lo, hi = problem.bounds
    u = np.clip(tabulate_control(initial, grid, S).table, lo, min(hi, U_CAP))
    batch = None
    if cfg.mean_method == "mc":
        batch = reference_sample(problem.G, problem.law, problem.horizon, cfg.fixed_point.n_paths, cfg.seed)
    mean_prev = None
    change = np.inf
    for r in range(1, cfg.max_rounds + 1):
        ctrl = TabulatedControl(grid, u)
        inputs = control_law(problem, ctrl, cfg.cells, cfg.mean_method, cfg.fixed_point, cfg.seed,
                             initial=mean_prev, batch=batch)
        mean_prev = inputs.mean
        fld = solve_adjoint_ode(smp_driver(problem, ctrl, inputs), problem.G, grid)
        new = improve_control(problem, fld, inputs)
        change = float(np.max(np.abs(new - u)))
        u = (1 - cfg.damping) * u + cfg.damping * new
        if change <= cfg.tol:
            ctrl = TabulatedControl(grid, u)
            inputs = control_law(problem, ctrl, cfg.cells, cfg.mean_method, cfg.fixed_point, cfg.seed,
                                 initial=mean_prev, batch=batch)
            fld = solve_adjoint_ode(smp_driver(problem, ctrl, inputs), problem.G, grid)
            return SMPResult(ctrl, fld, inputs, r, change)
    best = SMPResult(TabulatedControl(grid, u), fld, inputs, cfg.max_rounds, change)
    raise NoConvergence(f"SMP loop did not settle in {cfg.max_rounds} rounds (change {change:.3g})",
                        best=best, iterations=cfg.max_rounds, residual=change)


def expected_cost_ode(problem: ControlProblem, control: Control, cells: int = 256, substeps: int = 4) -> float:
    """J(u) from the forward equation of the (mean-consistent) marginal law.

    Running costs are read at cell midpoints and integrated by Simpson's rule
    per cell on the law, taken on a half-cell grid so the midpoint weight
    uses the actual law; exact up to time stepping on finite chains.
    """
    grid = uniform_grid(problem.horizon, cells)
    S = problem.G.size
    kappa = problem.kappa if problem.kappa is not None else np.zeros(S)
    fine = forward_law(problem.intensity, control, kappa, problem.law, problem.horizon, 2 * cells,
                       max(1, substeps // 2))
    mean = MeanCurve(grid, fine.mean.values[::2], fine.mean.kappa_tag) if problem.intensity.uses_mean else None
    inputs = law_inputs(problem, grid, fine.law[::2], mean)
    law = fine.law
    idx = np.arange(S)
    cost = problem.cost
    total = 0.0
    if cost.running is not None:
        for k in range(cells):
            tm = np.full(S, 0.5 * (grid[k] + grid[k + 1]))
            mf = np.full(S, np.nan) if inputs.mean_f is None else np.full(S, float(inputs.mean_f.values[k]))
            f = np.asarray(cost.running(tm, idx, mf, np.asarray(control(tm, idx), dtype=float)), dtype=float)
            total += (grid[k + 1] - grid[k]) / 6 * float((law[2 * k] + 4 * law[2 * k + 1] + law[2 * k + 2]) @ f)
    if cost.terminal is not None:
        total += float(law[-1] @ np.asarray(cost.terminal(idx, inputs.m_h), dtype=float))
    return total
