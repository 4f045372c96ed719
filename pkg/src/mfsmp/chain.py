"""Reference Markov chain machinery: generators, exact path simulation and
pathwise counting statistics.

States are arbitrary nonnegative integers; internally every routine works with
*state indices* into ``states`` and converts to values only where the value
itself matters (the representation ``x(t) = x(0) + sum (j - i) N_ij(t)``).
Controls and intensities are Markov feedback laws: they see the path only
through the pre-jump state index ``x(t-)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .errors import MajorantViolation, NegativeRate, RowSumViolation

# (t, state_idx, mean, control) -> (n, S) rates; all array arguments have shape (n,)
RateFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# (t, state_idx) -> (n,) control values
Control = Callable[[np.ndarray, np.ndarray], np.ndarray]

DIAG_TOL = 1e-12


@dataclass(frozen=True)
class GeneratorMatrix:
    states: np.ndarray
    rates: np.ndarray

    @property
    def size(self) -> int:
        return len(self.states)

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def apply(self, f: np.ndarray) -> np.ndarray:
        """(Gf)(i) = sum_j g_ij (f(j) - f(i))."""
        f = np.asarray(f, dtype=float)
        off = self.rates - np.diag(np.diag(self.rates))
        return off @ f - off.sum(axis=1) * f


def validate_generator(rates, states: Sequence[int], strict_positive: bool = False) -> GeneratorMatrix:
    """Check a Q-matrix and return it as a frozen :class:`GeneratorMatrix`.

    A diagonal that differs from minus the off-diagonal row sum by at most
    ``1e-12`` is replaced by the exact value; larger discrepancies are refused.
    With ``strict_positive`` every off-diagonal entry must be > 0, as required of
    a reference measure.
    """
    q = np.array(rates, dtype=float)
    st = np.array(states, dtype=np.int64)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] != len(st):
        raise ValueError(f"rate matrix shape {q.shape} does not match {len(st)} states")
    if len(np.unique(st)) != len(st) or np.any(st < 0):
        raise ValueError("states must be distinct nonnegative integers")
    if not np.all(np.isfinite(q)):
        raise ValueError("rates must be finite")
    off_mask = ~np.eye(len(st), dtype=bool)
    if np.any(q[off_mask] < 0):
        i, j = np.argwhere((q < 0) & off_mask)[0]
        raise NegativeRate(f"off-diagonal rate g[{st[i]},{st[j]}] = {q[i, j]} < 0")
    if strict_positive and np.any(q[off_mask] <= 0):
        i, j = np.argwhere((q <= 0) & off_mask)[0]
        raise NegativeRate(f"reference rate g[{st[i]},{st[j]}] must be > 0")
    off_sum = np.where(off_mask, q, 0.0).sum(axis=1)
    diag = np.diag(q)
    bad = np.abs(diag + off_sum) > DIAG_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise RowSumViolation(f"row {st[i]} sums to {diag[i] + off_sum[i]:.3g}")
    q[np.diag_indices_from(q)] = -off_sum
    q.setflags(write=False)
    st.setflags(write=False)
    return GeneratorMatrix(states=st, rates=q)


@dataclass(frozen=True)
class JumpPath:
    """One piecewise-constant right-continuous trajectory on ``[0, horizon]``."""

    x0: int
    times: tuple[float, ...]
    to_states: tuple[int, ...]
    horizon: float

    def __post_init__(self):
        if len(self.times) != len(self.to_states):
            raise ValueError("times and to_states differ in length")
        prev_t, prev_x = 0.0, self.x0
        for t, x in zip(self.times, self.to_states):
            if not (prev_t < t <= self.horizon):
                raise ValueError(f"event time {t} out of order or outside (0, T]")
            if x == prev_x:
                raise ValueError(f"event at {t} is not a jump (state {x})")
            prev_t, prev_x = t, x

    @property
    def events(self) -> list[tuple[float, int]]:
        return list(zip(self.times, self.to_states))

    def state_at(self, t: float) -> int:
        k = np.searchsorted(np.asarray(self.times), t, side="right")
        return self.x0 if k == 0 else self.to_states[k - 1]

    def state_before(self, t: float) -> int:
        k = np.searchsorted(np.asarray(self.times), t, side="left")
        return self.x0 if k == 0 else self.to_states[k - 1]

    @property
    def final_state(self) -> int:
        return self.to_states[-1] if self.to_states else self.x0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "state"])
        w.writerow([_fmt(0.0), self.x0])
        for t, x in self.events:
            w.writerow([_fmt(t), x])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, horizon: float) -> "JumpPath":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["time", "state"]:
            raise ValueError("expected header 'time,state'")
        body = rows[1:]
        if not body or float(body[0][0]) != 0.0:
            raise ValueError("first row must be 0.0,x0")
        x0 = int(body[0][1])
        return cls(x0, tuple(float(r[0]) for r in body[1:]), tuple(int(r[1]) for r in body[1:]), horizon)


def _fmt(x: float) -> str:
    """17 significant digits, always readable as a float (``0.0`` rather than ``0``)."""
    s = format(float(x), ".17g")
    return s if any(c in s for c in ".ein") else s + ".0"


@dataclass(frozen=True)
class PathBatch:
    """Many paths in flat arrays; events of path ``p`` are ``offsets[p]:offsets[p+1]``.

    ``x0`` and ``to_idx`` hold state indices into ``states``.
    """

    states: np.ndarray
    x0: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    to_idx: np.ndarray
    horizon: float

    def __len__(self) -> int:
        return len(self.x0)

    @property
    def n_events(self) -> np.ndarray:
        return np.diff(self.offsets)

    def from_idx(self) -> np.ndarray:
        """Pre-jump state index of every event."""
        prev = np.empty_like(self.to_idx)
        if len(prev):
            prev[1:] = self.to_idx[:-1]
            firsts = self.offsets[:-1][self.n_events > 0]
            prev[firsts] = self.x0[self.n_events > 0]
        return prev

    def event_path(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.n_events)

    def final_idx(self) -> np.ndarray:
        out = self.x0.copy()
        has = self.n_events > 0
        out[has] = self.to_idx[self.offsets[1:][has] - 1]
        return out

    def path(self, p: int) -> JumpPath:
        lo, hi = self.offsets[p], self.offsets[p + 1]
        st = self.states
        return JumpPath(int(st[self.x0[p]]), tuple(float(t) for t in self.times[lo:hi]),
                        tuple(int(st[j]) for j in self.to_idx[lo:hi]), self.horizon)

    def paths(self) -> list[JumpPath]:
        return [self.path(p) for p in range(len(self))]

    def idx_at(self, t: float, left: bool = False) -> np.ndarray:
        """State index of every path at time ``t`` (``x(t-)`` when ``left``)."""
        before = self.times < t if left else self.times <= t
        k = np.bincount(self.event_path()[before], minlength=len(self))
        return np.where(k > 0, self.to_idx[np.maximum(self.offsets[:-1] + k - 1, 0)] if len(self.to_idx) else 0,
                        self.x0)

    @classmethod
    def from_paths(cls, paths: Sequence[JumpPath], states: Sequence[int]) -> "PathBatch":
        st = np.asarray(states, dtype=np.int64)
        lookup = {int(s): i for i, s in enumerate(st)}
        x0 = np.array([lookup[p.x0] for p in paths], dtype=np.int64)
        counts = np.array([len(p.times) for p in paths], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        times = np.array([t for p in paths for t in p.times], dtype=float)
        to_idx = np.array([lookup[x] for p in paths for x in p.to_states], dtype=np.int64)
        horizons = {p.horizon for p in paths}
        if len(horizons) != 1:
            raise ValueError("paths must share one horizon")
        return cls(st, x0, offsets, times, to_idx, horizons.pop())

    @classmethod
    def concat(cls, parts: Sequence["PathBatch"]) -> "PathBatch":
        first = parts[0]
        offsets = [np.zeros(1, dtype=np.int64)]
        base = 0
        for b in parts:
            offsets.append(b.offsets[1:] + base)
            base += b.offsets[-1]
        return cls(first.states, np.concatenate([b.x0 for b in parts]), np.concatenate(offsets),
                   np.concatenate([b.times for b in parts]), np.concatenate([b.to_idx for b in parts]),
                   first.horizon)


@dataclass(frozen=True)
class Intensity:
    """Controlled (possibly mean-dependent) jump intensity on a finite state list.

    ``rates(t, x, m, u)`` receives arrays of equal length ``n`` (times, pre-jump
    state indices, mean values, control values) and returns an ``(n, S)`` array
    of nonnegative rates; the diagonal column is ignored. ``majorant`` must bound
    every total exit rate the simulation can meet.
    """

    states: np.ndarray
    rates: RateFn
    majorant: float
    uses_mean: bool = False
    time_homogeneous: bool = False
    name: str = "custom"

    def evaluate(self, t, x, m=None, u=None) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=np.int64))
        n = max(len(t), len(x))
        t = np.broadcast_to(t, (n,))
        x = np.broadcast_to(x, (n,))
        m = np.broadcast_to(np.nan if m is None else np.asarray(m, dtype=float), (n,))
        u = np.broadcast_to(0.0 if u is None else np.asarray(u, dtype=float), (n,))
        r = np.array(self.rates(t, x, m, u), dtype=float, copy=True)
        r[np.arange(n), x] = 0.0
        return r


@dataclass(frozen=True)
class FeedbackControl:
    """Time-independent state feedback ``u(t, x) = values[x]``."""

    values: np.ndarray

    def __call__(self, t, x):
        return np.asarray(self.values, dtype=float)[x]

    def constant_on(self, grid) -> bool:
        return True


@dataclass(frozen=True)
class TabulatedControl:
    """Step control: ``table[k, x]`` on the cell ``(t_k, t_{k+1}]`` (``[0, t_1]`` for k = 0)."""

    grid: np.ndarray
    table: np.ndarray

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.grid, t, side="left") - 1, 0, len(self.grid) - 2)
        return self.table[k, x]

    def constant_on(self, grid) -> bool:
        from .girsanov import steps_align

        return steps_align(self.grid, np.asarray(grid, dtype=float))


def constant_intensity(G: GeneratorMatrix) -> Intensity:
    off = G.rates - np.diag(np.diag(G.rates))

    def rates(t, x, m, u):
        return off[x]

    return Intensity(G.states, rates, float(G.exit_rates().max(initial=0.0)), time_homogeneous=True,
                     name="reference")


@dataclass(frozen=True)
class PathStatistics:
    counts: dict
    occupation: dict
    representation_residual: int


def path_statistics(path: JumpPath) -> PathStatistics:
    counts: dict[tuple[int, int], int] = {}
    occupation: dict[int, float] = {}
    prev_t, prev_x = 0.0, path.x0
    for t, x in path.events:
        counts[(prev_x, x)] = counts.get((prev_x, x), 0) + 1
        occupation[prev_x] = occupation.get(prev_x, 0.0) + (t - prev_t)
        prev_t, prev_x = t, x
    occupation[prev_x] = occupation.get(prev_x, 0.0) + (path.horizon - prev_t)
    residual = path.final_state - path.x0 - sum((j - i) * n for (i, j), n in counts.items())
    return PathStatistics(counts, occupation, residual)


def batch_occupation(batch: PathBatch) -> np.ndarray:
    """(n, S) occupation times of every path."""
    n, S = len(batch), len(batch.states)
    occ = np.zeros((n, S))
    ep = batch.event_path()
    prev_t = np.zeros(len(batch.times))
    if len(prev_t):
        prev_t[1:] = batch.times[:-1]
        prev_t[batch.offsets[:-1][batch.n_events > 0]] = 0.0
    np.add.at(occ, (ep, batch.from_idx()), batch.times - prev_t)
    last_t = np.zeros(n)
    has = batch.n_events > 0
    last_t[has] = batch.times[batch.offsets[1:][has] - 1]
    np.add.at(occ, (np.arange(n), batch.final_idx()), batch.horizon - last_t)
    return occ


def batch_counts(batch: PathBatch) -> np.ndarray:
    """(n, S, S) jump counts N_ij(T)."""
    n, S = len(batch), len(batch.states)
    out = np.zeros((n, S, S), dtype=np.int64)
    np.add.at(out, (batch.event_path(), batch.from_idx(), batch.to_idx), 1)
    return out


def batch_representation_residual(batch: PathBatch) -> np.ndarray:
    st = batch.states
    disp = np.zeros(len(batch), dtype=np.int64)
    np.add.at(disp, batch.event_path(), st[batch.to_idx] - st[batch.from_idx()])
    return st[batch.final_idx()] - st[batch.x0] - disp


def dynkin_residual(path: JumpPath, G: GeneratorMatrix, f: Callable[[int], float]) -> float:
    """M^f_T = f(x(T)) - f(x(0)) - int_0^T (Gf)(x(s)) ds, exact on the path."""
    lookup = {int(s): i for i, s in enumerate(G.states)}
    fv = np.array([f(int(s)) for s in G.states], dtype=float)
    gf = G.apply(fv)
    occ = path_statistics(path).occupation
    integral = sum(gf[lookup[s]] * dt for s, dt in occ.items())
    return float(fv[lookup[path.final_state]] - fv[lookup[path.x0]] - integral)


def batch_dynkin_residual(batch: PathBatch, G: GeneratorMatrix, fv: np.ndarray) -> np.ndarray:
    fv = np.asarray(fv, dtype=float)
    return fv[batch.final_idx()] - fv[batch.x0] - batch_occupation(batch) @ G.apply(fv)


def optional_variation(path: JumpPath, G: GeneratorMatrix) -> tuple[float, float]:
    """Return ``([M](T), <M>(T))``: jump count and integrated exit rate."""
    lookup = {int(s): i for i, s in enumerate(G.states)}
    exits = G.exit_rates()
    occ = path_statistics(path).occupation
    predictable = sum(exits[lookup[s]] * dt for s, dt in occ.items())
    return float(len(path.times)), float(predictable)


def batch_optional_variation(batch: PathBatch, G: GeneratorMatrix) -> tuple[np.ndarray, np.ndarray]:
    return batch.n_events.astype(float), batch_occupation(batch) @ G.exit_rates()


@dataclass(frozen=True)
class InitialLaw:
    """Point mass (``probs`` is None) or categorical law over state indices."""

    x0_idx: int = 0
    probs: Optional[np.ndarray] = None

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        if self.probs is None:
            return np.full(len(uniforms), self.x0_idx, dtype=np.int64)
        cdf = np.cumsum(self.probs)
        return np.minimum(np.searchsorted(cdf, uniforms * cdf[-1], side="right"), len(cdf) - 1).astype(np.int64)

    def vector(self, n_states: int) -> np.ndarray:
        if self.probs is None:
            v = np.zeros(n_states)
            v[self.x0_idx] = 1.0
            return v
        return np.asarray(self.probs, dtype=float) / np.sum(self.probs)


def initial_law(states: Sequence[int], x0=None, probs=None) -> InitialLaw:
    st = [int(s) for s in states]
    if probs is not None:
        p = np.asarray(probs, dtype=float)
        if p.shape != (len(st),) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError("initial law must be a nonnegative vector over the states")
        return InitialLaw(0, p / p.sum())
    if x0 not in st:
        raise ValueError(f"initial state {x0} not in state list")
    return InitialLaw(st.index(int(x0)))


def _simulate_block(intensity: Intensity, law: InitialLaw, horizon: float, seed: int,
                    block: int, lo: int, hi: int, mean, control: Optional[Control]) -> PathBatch:
    gen = rng.block_generator(seed, block)
    B = rng.BLOCK
    lam = float(intensity.majorant)
    x = law.sample(gen.random(B))
    x0 = x.copy()
    t = np.zeros(B)
    active = np.zeros(B, dtype=bool)
    active[lo:hi] = True
    ev_p, ev_t, ev_j = [], [], []
    S = len(intensity.states)
    while lam > 0 and active.any():
        e = gen.standard_exponential(B)
        v = gen.random(B)
        t = t + e / lam
        active &= t <= horizon
        idx = np.nonzero(active)[0]
        if not len(idx):
            break
        ti, xi = t[idx], x[idx]
        m = mean.left(ti) if mean is not None else None
        u = control(ti, xi) if control is not None else None
        r = intensity.evaluate(ti, xi, m, u)
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("intensity returned negative or non-finite rates")
        total = r.sum(axis=1)
        if np.any(total > lam * (1 + 1e-12)):
            k = int(np.argmax(total))
            raise MajorantViolation(f"total rate {total[k]:.6g} at t={ti[k]:.6g} exceeds majorant {lam:.6g}")
        c = np.cumsum(r, axis=1)
        j = (c <= (v[idx] * lam)[:, None]).sum(axis=1)
        acc = j < S
        ev_p.append(idx[acc])
        ev_t.append(ti[acc])
        ev_j.append(j[acc])
        x[idx[acc]] = j[acc]
    if ev_p:
        p = np.concatenate(ev_p)
        tt = np.concatenate(ev_t)
        jj = np.concatenate(ev_j)
    else:
        p = np.zeros(0, dtype=np.int64)
        tt = np.zeros(0)
        jj = np.zeros(0, dtype=np.int64)
    keep = (p >= lo) & (p < hi)
    p, tt, jj = p[keep], tt[keep], jj[keep]
    order = np.argsort(p, kind="stable")
    p, tt, jj = p[order] - lo, tt[order], jj[order].astype(np.int64)
    counts = np.bincount(p, minlength=hi - lo)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return PathBatch(intensity.states, x0[lo:hi].astype(np.int64), offsets, tt, jj, float(horizon))


def simulate_paths(intensity: Intensity, law: InitialLaw, horizon: float, n: int, seed: int,
                   mean=None, control: Optional[Control] = None, start: int = 0,
                   threads: int | None = None) -> PathBatch:
    """Exact thinning simulation of paths ``start .. start + n - 1``.

    Candidate epochs come from a rate-``majorant`` Poisson clock; a candidate
    at ``t`` jumps to ``j`` with probability ``lambda_ij(t-)/majorant``. Rates
    see the mean curve and control at the candidate time with the pre-jump
    state, which is the predictable (left-limit) convention.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    parts = rng.ordered_map(
        lambda blk: _simulate_block(intensity, law, horizon, seed, blk[0], blk[1], blk[2], mean, control),
        rng.blocks(start, n), threads)
    if not parts:
        return PathBatch(intensity.states, np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64),
                         np.zeros(0), np.zeros(0, dtype=np.int64), float(horizon))
    return PathBatch.concat(parts)


def simulate_path(intensity: Intensity, x0: int, horizon: float, seed: int, mean=None,
                  control: Optional[Control] = None, path_index: int = 0) -> JumpPath:
    law = initial_law(intensity.states, x0=x0)
    return simulate_paths(intensity, law, horizon, 1, seed, mean, control, start=path_index).path(0)


def transition_matrix(G: GeneratorMatrix, t: float) -> np.ndarray:
    from scipy.linalg import expm

    return expm(G.rates * t)
