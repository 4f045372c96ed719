"""Change of measure from the reference chain to controlled intensities.

Everything downstream uses the density process as an importance weight on
paths simulated under the reference generator. The workhorse is
:func:`sweep`, which walks a batch of paths cell by cell along a uniform time
grid and accumulates, in log space,

    log L(t) = sum_jumps log(lambda_ij / g_ij) - int_0^t sum_j (lambda_xj - g_xj) ds

together with optional weighted running costs and per-edge compensators.
When rates, controls and running costs are constant inside grid cells the
exponent is piecewise linear in time and the whole batch is handled with
per-event increments against cumulative tables. Otherwise every
constant-state piece is integrated with 3-point Gauss-Legendre nodes, which
never touch piece endpoints and so respect the left-limit convention of
step mean curves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .chain import (
    Control,
    GeneratorMatrix,
    InitialLaw,
    Intensity,
    JumpPath,
    PathBatch,
    constant_intensity,
    simulate_paths,
)
from .errors import UnsupportedTransition, ZeroRateAtJump

_XI = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_W = np.array([5.0, 8.0, 5.0]) / 18.0


def _partial_weights() -> np.ndarray:
    # row m: weights giving int_0^{xi_m} p(r) dr for the quadratic p through the nodes
    out = np.zeros((3, 3))
    for k in range(3):
        y = np.zeros(3)
        y[k] = 1.0
        poly = np.polyint(np.polyfit(_XI, y, 2))
        out[:, k] = np.polyval(poly, _XI) - np.polyval(poly, 0.0)
    return out


_WPART = _partial_weights()

SWEEP_BLOCK = 8192

Running = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LikelihoodRatioField:
    """ell_ij = lambda_ij / g_ij - 1 off the diagonal, 0 on it."""

    intensity: Intensity
    G: GeneratorMatrix

    def __call__(self, t, x, m=None, u=None) -> np.ndarray:
        r = self.intensity.evaluate(t, x, m, u)
        x = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=np.int64)), (len(r),))
        g = _offdiag(self.G)[x]
        bad = (g == 0) & (r > 0)
        if np.any(bad):
            k, j = np.argwhere(bad)[0]
            raise UnsupportedTransition(
                f"lambda[{self.G.states[x[k]]},{self.G.states[j]}] = {r[k, j]} > 0 where g = 0")
        with np.errstate(divide="ignore", invalid="ignore"):
            ell = np.where(g > 0, r / np.where(g > 0, g, 1.0) - 1.0, 0.0)
        ell[np.arange(len(r)), x] = 0.0
        return ell


def likelihood_ratio_field(intensity: Intensity, G: GeneratorMatrix) -> LikelihoodRatioField:
    if not np.array_equal(intensity.states, G.states):
        raise ValueError("intensity and generator live on different state lists")
    return LikelihoodRatioField(intensity, G)


def _offdiag(G: GeneratorMatrix) -> np.ndarray:
    return G.rates - np.diag(np.diag(G.rates))


@dataclass(frozen=True)
class DensityTrajectory:
    grid: np.ndarray
    values: np.ndarray
    zero_rate: bool = False

    def at(self, t: float) -> float:
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return float(self.values[max(k, 0)])


@dataclass
class SweepResult:
    log_density: np.ndarray  # (n, K+1), log L at grid points
    grid_idx: np.ndarray  # (n, K+1), x(t_k)
    running: np.ndarray  # (n,), int L(t) f dt (or int f dt when unweighted)
    edge_counts: np.ndarray  # (n, E), N_ij(T)
    compensators: np.ndarray  # (n, E), int lambda_ij I_i ds
    zero_rate: np.ndarray  # (n,) bool
    jumps: list = field(default_factory=list)  # (path, time, log L after jump)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    @property
    def terminal_density(self) -> np.ndarray:
        return np.exp(self.log_density[:, -1])


def uniform_grid(horizon: float, cells: int) -> np.ndarray:
    if cells < 1:
        raise ValueError("grid needs at least one cell")
    return np.linspace(0.0, float(horizon), int(cells) + 1)


def _cell_tables(grid, intensity, mean, control, running, S):
    """Rates and running costs at cell midpoints for every state, shape (K, S, ...)."""
    K = len(grid) - 1
    mid = 0.5 * (grid[:-1] + grid[1:])
    t = np.repeat(mid, S)
    xs = np.tile(np.arange(S), K)
    u = control(t, xs) if control is not None else np.zeros(len(t))
    rates = None
    if intensity is not None:
        m = mean.left(t) if mean is not None else None
        rates = intensity.evaluate(t, xs, m, u).reshape(K, S, S)
    f = None
    if running is not None:
        f = np.asarray(running(t, xs, u), dtype=float).reshape(K, S)
    return rates, f


def _span(d: np.ndarray, length: np.ndarray) -> np.ndarray:
    """int_0^length exp(-d s) ds."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = -np.expm1(-d * length) / d
    return np.where(d == 0, length, out)


def _sweep_block_cellwise(batch: PathBatch, lo: int, hi: int, grid: np.ndarray, G: Optional[GeneratorMatrix],
                          edges: Sequence[tuple[int, int]], record_jumps: bool, tables) -> SweepResult:
    # With rates constant on (t_k, t_{k+1}] the exponent is piecewise linear in time,
    # so every quantity follows from per-event increments and cumulative tables.
    t_rates, t_run = tables
    n = hi - lo
    K = len(grid) - 1
    S = len(batch.states)
    weighted = G is not None
    dt = np.diff(grid)
    e0, e1 = batch.offsets[lo], batch.offsets[hi]
    tau = batch.times[e0:e1]
    j = batch.to_idx[e0:e1]
    i = batch.from_idx()[e0:e1] if e1 > e0 else j.copy()
    p = np.repeat(np.arange(n), np.diff(batch.offsets[lo:hi + 1]))
    x0 = batch.x0[lo:hi]
    k_e = np.clip(np.searchsorted(grid, tau, side="left") - 1, 0, K - 1)
    into = tau - grid[k_e]

    if weighted:
        goff = _offdiag(G)
        gzero = goff == 0
        np.fill_diagonal(gzero, False)
        if np.any(t_rates[:, gzero] > 0):
            raise UnsupportedTransition("controlled rate positive on an edge with g_ij = 0")
        D = t_rates.sum(axis=2) - G.exit_rates()[None, :]
        lam = t_rates[k_e, i, j]
        zero_ev = lam <= 0
        with np.errstate(divide="ignore"):
            logr = np.where(zero_ev, 0.0, np.log(np.where(zero_ev, 1.0, lam) / np.where(zero_ev, 1.0, goff[i, j])))
    else:
        D = np.zeros((K, S))
        zero_ev = np.zeros(len(tau), dtype=bool)
        logr = np.zeros(len(tau))
    C = np.vstack([np.zeros(S), np.cumsum(D * dt[:, None], axis=0)])

    def c_at(state):
        return C[k_e, state] + into * D[k_e, state]

    delta = logr - c_at(i) + c_at(j)
    acc = np.zeros((n, K + 2))
    np.add.at(acc, (p, k_e + 1), delta)
    jumps_grid = np.zeros((n, K + 2), dtype=np.int64)
    np.add.at(jumps_grid, (p, k_e + 1), j - i)
    x_grid = (x0[:, None] + np.cumsum(jumps_grid, axis=1)[:, :K + 1]).astype(np.int32)
    cols = np.arange(K + 1)[None, :]
    log_l = np.cumsum(acc, axis=1)[:, :K + 1] - C[cols, x_grid]
    zero = np.zeros(n, dtype=bool)
    if zero_ev.any():
        zk = np.full(n, K + 1)
        np.minimum.at(zk, p[zero_ev], k_e[zero_ev] + 1)
        zero = zk <= K
        log_l[cols >= zk[:, None]] = -np.inf

    # log L just after each event, within its own path
    cs = np.cumsum(delta)
    first = batch.offsets[lo:hi][p] - e0
    before_first = np.where(first > 0, cs[np.maximum(first - 1, 0)], 0.0)
    log_after = cs - before_first - c_at(j)
    if zero_ev.any():
        dead = np.zeros(len(tau), dtype=bool)
        dead[zero_ev] = True
        # everything after a zero-rate jump on the same path has zero density
        dead = np.maximum.accumulate(np.where(dead, np.arange(len(tau)), -1)) >= first
        log_after[dead] = -np.inf

    run = np.zeros(n)
    if t_run is not None:
        first_t = np.broadcast_to(grid[1:], (n, K)).copy()
        np.minimum.at(first_t, (p, k_e), tau)
        xs = x_grid[:, :K]
        kk = np.broadcast_to(np.arange(K), (n, K))
        length = first_t - grid[None, :-1]
        terms = t_run[kk, xs] * _span(D[kk, xs], length)
        with np.errstate(invalid="ignore"):
            run = np.sum(np.exp(log_l[:, :K]) * terms, axis=1)
        if len(tau):
            same = np.zeros(len(tau), dtype=bool)
            same[:-1] = (p[1:] == p[:-1]) & (k_e[1:] == k_e[:-1])
            nxt = np.append(tau[1:], np.inf)
            stop = np.where(same, nxt, grid[k_e + 1])
            ev_terms = np.exp(log_after) * t_run[k_e, j] * _span(D[k_e, j], stop - tau)
            run = run + np.bincount(p, weights=ev_terms, minlength=n)

    n_e = len(edges)
    ecount = np.zeros((n, n_e))
    comp = np.zeros((n, n_e))
    xT = x_grid[:, K]
    for e, (a, b) in enumerate(edges):
        ecount[:, e] = np.bincount(p, weights=((i == a) & (j == b)).astype(float), minlength=n)
        r = t_rates[:, a, b]
        cum = np.concatenate([[0.0], np.cumsum(r * dt)])
        at = cum[k_e] + into * r[k_e]
        w = np.where(i == a, at, 0.0) - np.where(j == a, at, 0.0)
        comp[:, e] = np.bincount(p, weights=w, minlength=n) + (xT == a) * cum[K]
    jumps = list(zip((p + lo).tolist(), tau.tolist(), log_after.tolist())) if record_jumps else []
    return SweepResult(log_l, x_grid, run, ecount, comp, zero, jumps)


def _sweep_block(batch: PathBatch, lo: int, hi: int, grid: np.ndarray, intensity: Optional[Intensity],
                 G: Optional[GeneratorMatrix], mean, control: Optional[Control], running: Optional[Running],
                 edges: Sequence[tuple[int, int]], record_jumps: bool, tables) -> SweepResult:
    if tables is not None:
        return _sweep_block_cellwise(batch, lo, hi, grid, G, edges, record_jumps, tables)
    n = hi - lo
    K = len(grid) - 1
    weighted = G is not None
    times, to = batch.times, batch.to_idx
    x = batch.x0[lo:hi].copy()
    ptr = batch.offsets[lo:hi].copy()
    end = batch.offsets[lo + 1:hi + 1]
    n_ev = len(times)
    pad = np.append(times, np.inf)

    def next_time(p):
        q = ptr[p]
        return np.where(q < end[p], pad[np.minimum(q, n_ev)], np.inf)

    nxt = next_time(np.arange(n))
    log_l = np.zeros(n)
    out_l = np.empty((n, K + 1))
    out_x = np.empty((n, K + 1), dtype=np.int32)
    out_l[:, 0] = 0.0
    out_x[:, 0] = x
    run = np.zeros(n)
    n_e = len(edges)
    ecount = np.zeros((n, n_e))
    comp = np.zeros((n, n_e))
    zero = np.zeros(n, dtype=bool)
    jumps = []
    if weighted:
        goff = _offdiag(G)
        gexit = G.exit_rates()
        gzero = goff == 0
        np.fill_diagonal(gzero, False)
    need_rates = weighted or n_e > 0
    def controls(t, xs):
        return control(t, xs) if control is not None else np.zeros(len(t))

    def means(t):
        return mean.left(t) if mean is not None else None

    def piece_gauss(k, P, s0, s1):
        h = s1 - s0
        keep = h > 0
        if not keep.all():
            P, s0, h = P[keep], s0[keep], h[keep]
        if not len(P):
            return
        m = len(P)
        xs = np.repeat(x[P], 3)
        t = (s0[:, None] + h[:, None] * _XI[None, :]).ravel()
        u = controls(t, xs) if (need_rates or running is not None) else None
        if need_rates:
            r = intensity.evaluate(t, xs, means(t), u)
            if weighted:
                if np.any(r[gzero[xs]] > 0):
                    raise UnsupportedTransition("controlled rate positive on an edge with g_ij = 0")
                diff = (r.sum(axis=1) - gexit[xs]).reshape(m, 3)
            r = r.reshape(m, 3, -1)
        base = log_l[P]
        if weighted:
            log_l[P] = base - h * (diff @ _W)
        if running is not None:
            f = np.asarray(running(t, xs, u), dtype=float).reshape(m, 3)
            if weighted:
                lw = np.exp(base[:, None] - h[:, None] * (diff @ _WPART.T))
                run[P] += h * ((lw * f) @ _W)
            else:
                run[P] += h * (f @ _W)
        for e, (i, j) in enumerate(edges):
            at_i = x[P] == i
            if at_i.any():
                comp[P[at_i], e] += h[at_i] * (r[at_i, :, j] @ _W)

    piece = piece_gauss

    def jump(k, J, tau):
        xi = x[J]
        j = to[ptr[J]]
        if weighted:
            r = intensity.evaluate(tau, xi, means(tau), controls(tau, xi))
            lam = r[np.arange(len(J)), j]
            g = goff[xi, j]
            z = lam <= 0
            if np.any(z):
                zero[J[z]] = True
            with np.errstate(divide="ignore"):
                log_l[J] += np.where(z, -np.inf, np.log(np.where(z, 1.0, lam) / g))
        for e, (i, jj) in enumerate(edges):
            ecount[J, e] += (xi == i) & (j == jj)
        x[J] = j
        ptr[J] += 1
        nxt[J] = next_time(J)
        if record_jumps:
            jumps.extend(zip((J + lo).tolist(), tau.tolist(), log_l[J].tolist()))

    every = np.arange(n)
    for k in range(K):
        a, b = grid[k], grid[k + 1]
        live = every
        s0 = np.full(n, a)
        while len(live):
            tn = nxt[live]
            piece(k, live, s0[live], np.minimum(tn, b))
            hit = tn <= b
            J = live[hit]
            if len(J):
                jump(k, J, tn[hit])
                s0[J] = tn[hit]
            live = J
        out_l[:, k + 1] = log_l
        out_x[:, k + 1] = x
    return SweepResult(out_l, out_x, run, ecount, comp, zero, jumps)


def cellwise_constant(grid: np.ndarray, intensity: Optional[Intensity], control, mean=None,
                      running_cellwise: bool = True) -> bool:
    """True when rates, control and running cost are constant inside grid cells.

    Mean curves are step functions on their own grid; they qualify when every
    sweep cell sits inside one of their cells. Controls qualify through a
    ``constant_on(grid)`` method.
    """
    if intensity is not None and not intensity.time_homogeneous:
        return False
    if control is not None:
        check = getattr(control, "constant_on", None)
        if check is None or not check(grid):
            return False
    if mean is not None and intensity is not None and intensity.uses_mean and not steps_align(mean.grid, grid):
        return False
    return running_cellwise


def steps_align(coarse: np.ndarray, fine: np.ndarray) -> bool:
    """Every cell of ``fine`` lies inside a single cell of ``coarse``."""
    if fine[-1] > coarse[-1] + 1e-12:
        return False
    lo = np.clip(np.searchsorted(coarse, fine[:-1], side="right") - 1, 0, len(coarse) - 2)
    return bool(np.all(fine[1:] <= coarse[lo + 1] + 1e-12 * max(1.0, coarse[-1])))


def sweep(batch: PathBatch, grid: np.ndarray, intensity: Optional[Intensity] = None,
          G: Optional[GeneratorMatrix] = None, mean=None, control: Optional[Control] = None,
          running: Optional[Running] = None, edges: Sequence[tuple[int, int]] = (),
          record_jumps: bool = False, threads: int | None = None,
          cellwise: Optional[bool] = None, running_cellwise: bool = False) -> SweepResult:
    """Walk ``batch`` along ``grid``; weight by L^u when ``G`` is given.

    ``edges`` are (from, to) state-index pairs whose counts and controlled
    compensators ``int lambda_ij I_i ds`` are tracked. Event times must lie in
    ``(0, grid[-1]]``.

    With ``cellwise`` (auto-detected when None) rates, controls and running
    costs are tabulated once per cell and state and the piece integrals are
    analytic; otherwise every piece uses Gauss-Legendre nodes.
    """
    grid = np.asarray(grid, dtype=float)
    if G is not None and intensity is None:
        raise ValueError("a weighted sweep needs the controlled intensity")
    if (G is not None or edges) and intensity is None:
        raise ValueError("edge compensators need the controlled intensity")
    if cellwise is None:
        cellwise = cellwise_constant(grid, intensity, control, mean, running is None or running_cellwise)
    tables = _cell_tables(grid, intensity, mean, control, running, len(batch.states)) if cellwise else None
    n = len(batch)
    chunks = [(lo, min(lo + SWEEP_BLOCK, n)) for lo in range(0, n, SWEEP_BLOCK)]
    parts = rng.ordered_map(
        lambda c: _sweep_block(batch, c[0], c[1], grid, intensity, G, mean, control, running,
                               tuple(edges), record_jumps, tables), chunks, threads)
    if not parts:
        K = len(grid) - 1
        E = len(edges)
        return SweepResult(np.zeros((0, K + 1)), np.zeros((0, K + 1), dtype=np.int64), np.zeros(0),
                           np.zeros((0, E)), np.zeros((0, E)), np.zeros(0, dtype=bool))
    return SweepResult(
        np.concatenate([p.log_density for p in parts]),
        np.concatenate([p.grid_idx for p in parts]),
        np.concatenate([p.running for p in parts]),
        np.concatenate([p.edge_counts for p in parts]),
        np.concatenate([p.compensators for p in parts]),
        np.concatenate([p.zero_rate for p in parts]),
        [j for p in parts for j in p.jumps],
    )


def _as_batch(path: JumpPath, states) -> PathBatch:
    return PathBatch.from_paths([path], states)


def density_product(path: JumpPath, intensity: Intensity, G: GeneratorMatrix, mean=None,
                    control: Optional[Control] = None, grid: Optional[np.ndarray] = None,
                    strict: bool = False) -> DensityTrajectory:
    """Product-form density L^u on ``grid`` plus every jump time of ``path``.

    A realized jump with zero controlled rate makes the density vanish; this
    is flagged on the result (or raised with ``strict``).
    """
    likelihood_ratio_field(intensity, G)
    if grid is None:
        grid = uniform_grid(path.horizon, 256)
    res = sweep(_as_batch(path, G.states), grid, intensity, G, mean, control, record_jumps=True, threads=1)
    if strict and res.zero_rate[0]:
        raise ZeroRateAtJump("a realized jump has zero controlled intensity")
    ts = np.concatenate([grid, [t for _, t, _ in res.jumps]])
    vals = np.concatenate([res.log_density[0], [v for _, _, v in res.jumps]])
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    # a jump on a grid point: keep the post-jump value
    keep = np.append(ts[1:] != ts[:-1], True)
    return DensityTrajectory(ts[keep], np.exp(vals[keep]), bool(res.zero_rate[0]))


def density_sde_euler(path: JumpPath, intensity: Intensity, G: GeneratorMatrix, dt: float, mean=None,
                      control: Optional[Control] = None, grid: Optional[np.ndarray] = None,
                      strict: bool = False) -> DensityTrajectory:
    """Euler scheme for dL = L(s-) sum_ij I_i(s-) ell_ij dM_ij.

    Jumps multiply L by ``1 + ell_ij = lambda_ij / g_ij`` exactly; between jumps
    the compensator drift ``-L sum_j ell_ij g_ij ds`` is stepped explicitly with
    steps of at most ``dt`` (rates frozen at the left end of each step).
    """
    ell = likelihood_ratio_field(intensity, G)
    if grid is None:
        grid = uniform_grid(path.horizon, 256)
    lookup = {int(s): i for i, s in enumerate(G.states)}
    goff = _offdiag(G)
    marks = sorted(set(np.asarray(grid, dtype=float).tolist()) | set(path.times))
    jumps = dict(zip(path.times, path.to_states))
    x = lookup[path.x0]
    value = 1.0
    t_prev = 0.0
    out_t, out_v = [0.0], [1.0]
    zero = False

    def eval_ell(t, xi):
        tt = np.array([t])
        m = mean.left(tt) if mean is not None else None
        u = control(tt, np.array([xi])) if control is not None else None
        return ell(tt, np.array([xi]), m, u)[0]

    for mark in marks:
        if mark <= t_prev:
            continue
        span = mark - t_prev
        steps = max(1, int(np.ceil(span / dt - 1e-12)))
        h = span / steps
        for s in range(steps):
            e = eval_ell(t_prev + s * h, x)
            value -= value * float(np.dot(e, goff[x])) * h
        t_prev = mark
        if mark in jumps:
            j = lookup[jumps[mark]]
            factor = 1.0 + eval_ell(mark, x)[j]
            if factor <= 0:
                zero = True
                if strict:
                    raise ZeroRateAtJump("a realized jump has zero controlled intensity")
            value *= factor
            x = j
        out_t.append(mark)
        out_v.append(value)
    return DensityTrajectory(np.array(out_t), np.array(out_v), zero)


@dataclass
class MartingaleReport:
    n_paths: int
    mean_L: float
    se_L: float
    pass_L: bool
    per_edge: list

    @property
    def passed(self) -> bool:
        return self.pass_L and all(e["pass"] for e in self.per_edge)

    def to_dict(self) -> dict:
        return {"mean_L": self.mean_L, "se_L": self.se_L, "pass_L": self.pass_L, "per_edge": self.per_edge}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = float(np.sum(values) / n)
    if n < 2:
        return mean, float("nan")
    return mean, float(np.std(values, ddof=1) / np.sqrt(n))


def martingale_checks(intensity: Intensity, G: GeneratorMatrix, law: InitialLaw, horizon: float, n: int,
                      seed: int, control: Optional[Control] = None, mean=None,
                      edges: Optional[Sequence[tuple[int, int]]] = None, cells: int = 256,
                      threads: int | None = None) -> MartingaleReport:
    """Statistical checks of E[L^u(T)] = 1 and E[L^u(T) M^u_ij(T)] = 0 under P.

    ``M^u_ij(T) = N_ij(T) - int lambda^u_ij I_i ds``. Edges default to every
    off-diagonal pair of the reference generator.
    """
    likelihood_ratio_field(intensity, G)
    S = G.size
    if edges is None:
        edges = [(i, j) for i in range(S) for j in range(S) if i != j and G.rates[i, j] > 0]
    batch = simulate_paths(constant_intensity(G), law, horizon, n, seed, threads=threads)
    res = sweep(batch, uniform_grid(horizon, cells), intensity, G, mean, control, edges=edges, threads=threads)
    L = res.terminal_density
    mL, sL = mean_se(L)
    per_edge = []
    for e, (i, j) in enumerate(edges):
        v = L * (res.edge_counts[:, e] - res.compensators[:, e])
        m, s = mean_se(v)
        per_edge.append({"i": int(G.states[i]), "j": int(G.states[j]), "mean": m, "se": s,
                         "pass": bool(abs(m) <= 3 * s)})
    return MartingaleReport(n, mL, sL, bool(abs(mL - 1.0) <= 3 * sL), per_edge)
