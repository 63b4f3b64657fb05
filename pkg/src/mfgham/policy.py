"""Entropy-regularized (Gibbs) savings policies over feasible intervals.

The quantal response to an action-value function Q at temperature zeta is
the density u(a | s) proportional to exp(Q(s, a) / zeta) on the feasible
interval of s. All normalization runs through composite Simpson quadrature
in the log domain (a max shift keeps exp bounded even at zeta near zero),
and sampling inverts the quadrature CDF with uniform interpolation inside
grid cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidBounds, OutOfFeasible
from .mdp import ConcaveQ, FeasibleFn, HouseholdState

DEFAULT_GRID = 256
MIN_GRID = 16
_WIDTH_FLOOR = 1e-12


def simpson_weights(count: int, spacing: float) -> np.ndarray:
    """Composite Simpson weights for an odd point count."""
    if count < 3 or count % 2 == 0:
        raise InvalidBounds(f"Simpson rule needs an odd point count >= 3, got {count}")
    w = np.ones(count)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (spacing / 3.0)


def _odd(count: int) -> int:
    return count if count % 2 == 1 else count + 1


@dataclass(eq=False)
class GibbsPolicy:
    """Gibbs density proportional to exp(Q / zeta) on each feasible interval."""

    q: ConcaveQ
    zeta: float
    feasible: FeasibleFn
    grid_size: int = DEFAULT_GRID

    def __post_init__(self) -> None:
        if not (np.isfinite(self.zeta) and self.zeta > 0.0):
            raise InvalidBounds(f"temperature must be positive, got {self.zeta}")
        if self.grid_size < MIN_GRID:
            raise InvalidBounds(
                f"quadrature grid must have at least {MIN_GRID} points, "
                f"got {self.grid_size}"
            )

    # -- internal grids ----------------------------------------------------

    def _interval(self, state: HouseholdState) -> tuple[float, float]:
        lo, hi = self.feasible(
            np.array([state.capital]), np.array([state.income], dtype=np.int64)
        )
        return float(lo[0]), float(hi[0])

    def _grid_matrix(
        self, capital: np.ndarray, income: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-state action grids (N, G) plus interval bounds."""
        lo, hi = self.feasible(capital, income)
        count = _odd(self.grid_size)
        t = np.linspace(0.0, 1.0, count)
        grids = lo[:, None] + t[None, :] * (hi - lo)[:, None]
        return grids, lo, hi

    def _log_weights(
        self, capital: np.ndarray, income: np.ndarray, grids: np.ndarray
    ) -> np.ndarray:
        """Shifted logits Q/zeta - max on the grid rows, shape (N, G)."""
        n, g = grids.shape
        b = np.broadcast_to(capital[:, None], (n, g))
        w = np.broadcast_to(income[:, None], (n, g))
        logits = self.q.value(b, w, grids) / self.zeta
        return logits - logits.max(axis=1, keepdims=True)

    def _density_rows(
        self, capital: np.ndarray, income: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Normalized density on per-state grids: (density, grids, lo, hi)."""
        grids, lo, hi = self._grid_matrix(capital, income)
        width = np.maximum(hi - lo, _WIDTH_FLOOR)
        spacing = width / (grids.shape[1] - 1)
        shifted = np.exp(self._log_weights(capital, income, grids))
        weights = simpson_weights(grids.shape[1], 1.0)
        norm = (shifted * weights[None, :]).sum(axis=1) * spacing
        return shifted / norm[:, None], grids, lo, hi

    # -- public surface ----------------------------------------------------

    def density(self, state: HouseholdState, action: float) -> float:
        """Density of the policy at one action; errors off the feasible set."""
        lo, hi = self._interval(state)
        if action < lo - 1e-12 or action > hi + 1e-12:
            raise OutOfFeasible(
                f"action {action} outside feasible interval [{lo}, {hi}]"
            )
        if hi - lo <= _WIDTH_FLOOR:
            return 1.0 / _WIDTH_FLOOR
        grids, _, _ = self._grid_matrix(
            np.array([state.capital]), np.array([state.income], dtype=np.int64)
        )
        logits = (
            self.q.value(
                np.full(grids.shape[1], state.capital),
                np.full(grids.shape[1], state.income, dtype=np.int64),
                grids[0],
            )
            / self.zeta
        )
        shift = logits.max()
        spacing = (hi - lo) / (grids.shape[1] - 1)
        norm = float(
            (np.exp(logits - shift) * simpson_weights(grids.shape[1], spacing)).sum()
        )
        q_here = float(self.q.value(state.capital, state.income, action))
        return float(np.exp(q_here / self.zeta - shift) / norm)

    def density_on(
        self, capital: np.ndarray, income: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        """Vectorized density for aligned state/action arrays; 0 off-interval."""
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        a = np.asarray(actions, dtype=np.float64)
        lo, hi = self.feasible(b, w)
        width = np.maximum(hi - lo, _WIDTH_FLOOR)
        count = _odd(self.grid_size)
        t = np.linspace(0.0, 1.0, count)
        grids = lo[:, None] + t[None, :] * width[:, None]
        n = grids.shape[0]
        bmat = np.broadcast_to(b[:, None], (n, count))
        wmat = np.broadcast_to(w[:, None], (n, count))
        logits = self.q.value(bmat, wmat, grids) / self.zeta
        shift = logits.max(axis=1)
        spacing = width / (count - 1)
        norm = (
            np.exp(logits - shift[:, None]) * simpson_weights(count, 1.0)[None, :]
        ).sum(axis=1) * spacing
        logit_a = self.q.value(b, w, a) / self.zeta
        dens = np.exp(logit_a - shift) / norm
        inside = (a >= lo - 1e-12) & (a <= hi + 1e-12)
        return np.where(inside, dens, 0.0)

    def cdf(self, state: HouseholdState, action: float) -> float:
        """P(a <= action) via a fresh Simpson rule on [lo, action]."""
        lo, hi = self._interval(state)
        if hi - lo <= _WIDTH_FLOOR:
            return 1.0 if action >= hi else 0.0
        x = min(max(action, lo), hi)
        count = _odd(self.grid_size)

        def mass(upper: float) -> float:
            if upper - lo <= 0.0:
                return 0.0
            grid = np.linspace(lo, upper, count)
            logits = (
                self.q.value(
                    np.full(count, state.capital),
                    np.full(count, state.income, dtype=np.int64),
                    grid,
                )
                / self.zeta
            )
            shift = logits.max()
            return float(
                np.exp(shift)
                * (
                    np.exp(logits - shift)
                    * simpson_weights(count, (upper - lo) / (count - 1))
                ).sum()
            )

        total = mass(hi)
        return mass(x) / total

    def mean(self, state: HouseholdState) -> float:
        """Quadrature mean action."""
        dens, grids, lo, hi = self._density_rows(
            np.array([state.capital]), np.array([state.income], dtype=np.int64)
        )
        count = grids.shape[1]
        spacing = max(hi[0] - lo[0], _WIDTH_FLOOR) / (count - 1)
        w = simpson_weights(count, spacing)
        return float((dens[0] * grids[0] * w).sum())

    def sample(self, state: HouseholdState, rng: np.random.Generator) -> float:
        return float(
            self.sample_batch(
                np.array([state.capital]), np.array([state.income], dtype=np.int64), rng
            )[0]
        )

    def sample_batch(
        self, capital: np.ndarray, income: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Inverse-CDF draws with uniform interpolation inside grid cells."""
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        if b.shape != w.shape:
            raise DimensionMismatch("sample_batch needs aligned state arrays")
        out = np.empty(b.shape)
        u = rng.uniform(size=b.shape)
        chunk = max(1, int(2 ** 22 // max(_odd(self.grid_size), 1)))
        for start in range(0, b.shape[0], chunk):
            sl = slice(start, min(start + chunk, b.shape[0]))
            out[sl] = self._sample_rows(b[sl], w[sl], u[sl])
        return out

    def _sample_rows(
        self, b: np.ndarray, w: np.ndarray, u: np.ndarray
    ) -> np.ndarray:
        dens, grids, lo, hi = self._density_rows(b, w)
        # trapezoid cell masses, renormalized to a proper distribution
        cell = 0.5 * (dens[:, 1:] + dens[:, :-1]) * np.diff(grids, axis=1)
        total = cell.sum(axis=1, keepdims=True)
        total[total <= 0.0] = 1.0
        cum = np.cumsum(cell / total, axis=1)
        cum[:, -1] = 1.0
        idx = (cum < u[:, None]).sum(axis=1)
        idx = np.minimum(idx, cell.shape[1] - 1)
        left = np.take_along_axis(
            np.hstack([np.zeros((cum.shape[0], 1)), cum]), idx[:, None], axis=1
        )[:, 0]
        mass = np.take_along_axis(cum, idx[:, None], axis=1)[:, 0] - left
        mass[mass <= 0.0] = 1.0
        frac = np.clip((u - left) / mass, 0.0, 1.0)
        a0 = np.take_along_axis(grids, idx[:, None], axis=1)[:, 0]
        a1 = np.take_along_axis(grids, idx[:, None] + 1, axis=1)[:, 0]
        draw = a0 + frac * (a1 - a0)
        degenerate = (hi - lo) <= _WIDTH_FLOOR
        return np.where(degenerate, lo, draw)

    def quantile_table(
        self, capital_grid: np.ndarray, n_quantiles: int = 257
    ) -> "QuantileTable":
        """Per-level quantile surfaces for fast population sampling."""
        b_grid = np.asarray(capital_grid, dtype=np.float64)
        levels = self.q.n_levels
        u_levels = np.linspace(0.0, 1.0, n_quantiles)
        table = np.empty((levels, b_grid.size, n_quantiles))
        for level in range(levels):
            w = np.full(b_grid.shape, level, dtype=np.int64)
            dens, grids, lo, hi = self._density_rows(b_grid, w)
            cell = 0.5 * (dens[:, 1:] + dens[:, :-1]) * np.diff(grids, axis=1)
            total = cell.sum(axis=1, keepdims=True)
            total[total <= 0.0] = 1.0
            cum = np.hstack(
                [np.zeros((b_grid.size, 1)), np.cumsum(cell / total, axis=1)]
            )
            cum[:, -1] = 1.0
            for j in range(b_grid.size):
                # np.interp tolerates flat cdf stretches (returns an edge)
                table[level, j] = np.interp(u_levels, cum[j], grids[j])
            degenerate = (hi - lo) <= _WIDTH_FLOOR
            table[level, degenerate, :] = lo[degenerate, None]
        return QuantileTable(capital_grid=b_grid, table=table, feasible=self.feasible)


@dataclass(eq=False)
class QuantileTable:
    """Bilinear quantile interpolator used by the population simulator."""

    capital_grid: np.ndarray
    table: np.ndarray  # (levels, n_b, n_u)
    feasible: FeasibleFn

    def sample_batch(
        self, capital: np.ndarray, income: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        u = rng.uniform(size=b.shape)
        n_b = self.capital_grid.size
        n_u = self.table.shape[2]
        jb = np.clip(
            np.searchsorted(self.capital_grid, b, side="right") - 1, 0, n_b - 2
        )
        fb = (b - self.capital_grid[jb]) / (
            self.capital_grid[jb + 1] - self.capital_grid[jb]
        )
        fb = np.clip(fb, 0.0, 1.0)
        pos = u * (n_u - 1)
        ju = np.clip(pos.astype(np.int64), 0, n_u - 2)
        fu = pos - ju
        t00 = self.table[w, jb, ju]
        t01 = self.table[w, jb, ju + 1]
        t10 = self.table[w, jb + 1, ju]
        t11 = self.table[w, jb + 1, ju + 1]
        draw = (1 - fb) * ((1 - fu) * t00 + fu * t01) + fb * ((1 - fu) * t10 + fu * t11)
        lo, hi = self.feasible(b, w)
        return np.clip(draw, lo, hi)


@dataclass(eq=False)
class UniformPolicy:
    """Uniform density on each feasible interval (the zeta -> inf limit)."""

    feasible: FeasibleFn
    grid_size: int = DEFAULT_GRID

    def density(self, state: HouseholdState, action: float) -> float:
        lo, hi = self.feasible(
            np.array([state.capital]), np.array([state.income], dtype=np.int64)
        )
        lo_f, hi_f = float(lo[0]), float(hi[0])
        if action < lo_f - 1e-12 or action > hi_f + 1e-12:
            raise OutOfFeasible(
                f"action {action} outside feasible interval [{lo_f}, {hi_f}]"
            )
        return 1.0 / max(hi_f - lo_f, _WIDTH_FLOOR)

    def density_on(
        self, capital: np.ndarray, income: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        a = np.asarray(actions, dtype=np.float64)
        lo, hi = self.feasible(b, w)
        dens = 1.0 / np.maximum(hi - lo, _WIDTH_FLOOR)
        inside = (a >= lo - 1e-12) & (a <= hi + 1e-12)
        return np.where(inside, dens, 0.0)

    def sample(self, state: HouseholdState, rng: np.random.Generator) -> float:
        return float(
            self.sample_batch(
                np.array([state.capital]), np.array([state.income], dtype=np.int64), rng
            )[0]
        )

    def sample_batch(
        self, capital: np.ndarray, income: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        lo, hi = self.feasible(b, w)
        return lo + rng.uniform(size=b.shape) * (hi - lo)


def uniform_policy(feasible: FeasibleFn, grid_size: int = DEFAULT_GRID) -> UniformPolicy:
    return UniformPolicy(feasible=feasible, grid_size=grid_size)


def policy_distance(pi_a, pi_b, states: list[HouseholdState], grid_size: int = DEFAULT_GRID) -> float:
    """State-averaged sup (over a shared action grid) density difference.

    Both policies are evaluated on a grid covering the union of their
    feasible intervals; densities vanish off each policy's own interval.
    """
    if not states:
        raise DimensionMismatch("policy_distance needs at least one state")
    count = _odd(grid_size)
    sups = []
    for state in states:
        b = np.array([state.capital])
        w = np.array([state.income], dtype=np.int64)
        lo_a, hi_a = pi_a.feasible(b, w)
        lo_b, hi_b = pi_b.feasible(b, w)
        lo = min(float(lo_a[0]), float(lo_b[0]))
        hi = max(float(hi_a[0]), float(hi_b[0]))
        grid = np.linspace(lo, hi, count)
        bb = np.full(count, state.capital)
        ww = np.full(count, state.income, dtype=np.int64)
        da = pi_a.density_on(bb, ww, grid)
        db = pi_b.density_on(bb, ww, grid)
        sups.append(float(np.abs(da - db).max()))
    return float(np.mean(sups))
