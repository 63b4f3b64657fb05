"""Outer fixed-point loop: prices -> population -> firm -> prices.

Each round feeds the previous round's policy through the population
simulator, reprices capital and labor at the firm's marginal products,
samples a fresh dataset under the new prices, and refits the household
policy by convex fitted Q-iteration. A model-based reference solver on a
dense grid provides an independent fixed point for testing, and a small
diagnostic measures how fast the price trajectory contracts.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cfqi import CfqiConfig, cfqi
from .errors import (
    DimensionMismatch,
    InsufficientTrajectory,
    InvalidBounds,
    IterationDiverged,
    OracleNoConvergence,
)
from .household_firm import (
    AggregateIndicators,
    AiyagariConfig,
    MeanFieldTerm,
    aggregate_psi,
    chain_stationary,
    feasible_bounds,
    make_feasible_fn,
    marginal_products,
    sample_dataset,
)
from .policy import GibbsPolicy, UniformPolicy

DIVERGENCE_FACTOR = 10.0
TRAJECTORY_COLUMNS = (
    "t",
    "wage",
    "rent",
    "delta_l1",
    "cfqi_mean_risk",
    "psi_K",
    "psi_N",
    "seconds",
)

PsiFn = Callable[[AiyagariConfig, MeanFieldTerm, object, np.random.Generator],
                 AggregateIndicators]
PhiFn = Callable[[AiyagariConfig, AggregateIndicators], tuple[float, float]]


@dataclass(frozen=True)
class RoundRecord:
    """Diagnostics for one outer round (round 0 is the starting point)."""

    t: int
    wage: float
    rent: float
    delta_l1: float
    cfqi_mean_risk: float
    psi_capital: float
    psi_labor: float
    seconds: float


@dataclass(frozen=True)
class EquilibriumResult:
    """Price trajectory, per-round diagnostics, and the final policy."""

    trajectory: tuple[MeanFieldTerm, ...]
    records: tuple[RoundRecord, ...]
    policy: object
    seed: int

    @property
    def final(self) -> MeanFieldTerm:
        return self.trajectory[-1]

    def increments(self) -> np.ndarray:
        """l1 distances between consecutive prices, length T."""
        return np.array(
            [
                self.trajectory[t].l1_distance(self.trajectory[t - 1])
                for t in range(1, len(self.trajectory))
            ]
        )


def _default_psi(
    cfg: AiyagariConfig,
    prices: MeanFieldTerm,
    policy,
    rng: np.random.Generator,
) -> AggregateIndicators:
    return aggregate_psi(cfg, prices, policy, rng)


def _default_phi(
    cfg: AiyagariConfig, indicators: AggregateIndicators
) -> tuple[float, float]:
    return marginal_products(cfg, indicators.capital, indicators.labor)


def _guard_divergence(cfg: AiyagariConfig, wage: float, rent: float) -> None:
    """Reject raw prices that land absurdly far outside the price box."""
    wage_width = cfg.wage_max - cfg.wage_min
    rent_width = cfg.rent_max - cfg.rent_min
    wage_excess = max(cfg.wage_min - wage, wage - cfg.wage_max, 0.0)
    rent_excess = max(cfg.rent_min - rent, rent - cfg.rent_max, 0.0)
    if (
        wage_excess > DIVERGENCE_FACTOR * wage_width
        or rent_excess > DIVERGENCE_FACTOR * rent_width
    ):
        raise IterationDiverged(
            f"raw prices (wage={wage:.6g}, rent={rent:.6g}) left the price "
            f"box by more than {DIVERGENCE_FACTOR}x its width; the model is "
            "likely mis-configured"
        )


def solve(
    cfg: AiyagariConfig,
    *,
    rounds: int,
    sample_count: int,
    cfqi_config: CfqiConfig | None = None,
    seed: int = 0,
    psi_fn: PsiFn | None = None,
    phi_fn: PhiFn | None = None,
    exact_sampling: bool = False,
) -> EquilibriumResult:
    """Run the outer iteration for the given number of rounds.

    Round t prices the economy off the previous policy's aggregates, then
    refits the policy on a fresh dataset drawn under the new prices. The
    starting policy is uniform over feasible savings and the starting Q is
    identically zero, so round 1 reprices a purely exploratory population.
    All randomness is derived from the single integer seed.
    """
    if rounds < 0:
        raise InvalidBounds(f"rounds must be >= 0, got {rounds}")
    if sample_count < 1:
        raise InvalidBounds(f"sample_count must be >= 1, got {sample_count}")
    psi = psi_fn if psi_fn is not None else _default_psi
    phi = phi_fn if phi_fn is not None else _default_phi
    config = cfqi_config if cfqi_config is not None else CfqiConfig()
    config.validate()

    z = MeanFieldTerm(cfg.wage_init, cfg.rent_init)
    policy = UniformPolicy(make_feasible_fn(cfg, z))
    trajectory = [z]
    records = [RoundRecord(0, z.wage, z.rent, 0.0, 0.0, 0.0, 0.0, 0.0)]

    master = np.random.SeedSequence(seed)
    children = master.spawn(max(rounds, 1))
    for t in range(1, rounds + 1):
        start = time.perf_counter()
        psi_seq, data_seq, fit_seq = children[t - 1].spawn(3)
        indicators = psi(cfg, z, policy, np.random.default_rng(psi_seq))
        wage_raw, rent_raw = phi(cfg, indicators)
        _guard_divergence(cfg, wage_raw, rent_raw)
        z_next = cfg.clamp_prices(wage_raw, rent_raw)

        dataset_seed = int(data_seq.generate_state(1)[0])
        data = sample_dataset(cfg, z_next, sample_count, seed=dataset_seed)
        feasible = make_feasible_fn(cfg, z_next)
        fit = cfqi(
            data,
            feasible,
            gamma=cfg.gamma,
            n_levels=cfg.n_levels,
            upper_bound=cfg.value_cap,
            lipschitz=cfg.value_lipschitz(),
            config=config,
            rng=np.random.default_rng(fit_seq),
        )
        policy = GibbsPolicy(fit.q, cfg.zeta, feasible)
        if exact_sampling:
            policy = _ExactSamplingView(policy)

        delta = z_next.l1_distance(z)
        z = z_next
        trajectory.append(z)
        records.append(
            RoundRecord(
                t,
                z.wage,
                z.rent,
                delta,
                fit.mean_risk,
                indicators.capital,
                indicators.labor,
                time.perf_counter() - start,
            )
        )
    return EquilibriumResult(
        trajectory=tuple(trajectory),
        records=tuple(records),
        policy=policy,
        seed=seed,
    )


class _ExactSamplingView:
    """Policy wrapper that hides quantile_table so the population simulator
    falls back to per-household inverse-CDF sampling."""

    def __init__(self, policy: GibbsPolicy):
        self.inner = policy

    def sample_batch(self, capital, income, rng):
        return self.inner.sample_batch(capital, income, rng)

    def __getattr__(self, name):
        if name == "quantile_table":
            raise AttributeError(name)
        return getattr(self.inner, name)


# ---------------------------------------------------------------------------
# contraction diagnostics


@dataclass(frozen=True)
class ContractionReport:
    """Ratios of consecutive trajectory increments and their geometric mean."""

    ratios: tuple[float, ...]
    geometric_mean: float


def contraction_diagnostics(
    source: EquilibriumResult | Sequence[MeanFieldTerm],
) -> ContractionReport:
    """Measure the per-round contraction factor of a price trajectory.

    The t-th ratio is |z^{t+1} - z^t| / |z^t - z^{t-1}| in l1. Rounds where
    the previous increment is exactly zero report a ratio of 0, and the
    geometric mean is taken over the nonzero ratios (0 if there are none),
    so a trajectory parked at its fixed point scores as fully contracted.
    """
    trajectory = (
        source.trajectory if isinstance(source, EquilibriumResult) else tuple(source)
    )
    if len(trajectory) < 3:
        raise InsufficientTrajectory(
            f"need at least 3 trajectory points, got {len(trajectory)}"
        )
    deltas = np.array(
        [
            trajectory[t].l1_distance(trajectory[t - 1])
            for t in range(1, len(trajectory))
        ]
    )
    ratios = np.zeros(len(deltas) - 1)
    nonzero = deltas[:-1] > 0.0
    ratios[nonzero] = deltas[1:][nonzero] / deltas[:-1][nonzero]
    positive = ratios[ratios > 0.0]
    geo = float(np.exp(np.mean(np.log(positive)))) if len(positive) else 0.0
    return ContractionReport(ratios=tuple(float(r) for r in ratios), geometric_mean=geo)


# ---------------------------------------------------------------------------
# model-based reference fixed point


def _grid_value_iteration(
    cfg: AiyagariConfig,
    prices: MeanFieldTerm,
    grid: np.ndarray,
    v0: np.ndarray,
    tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact value iteration on the capital grid; returns (V, Q).

    Actions live on the same grid as capital, so continuation values need
    no interpolation; infeasible actions carry -inf utility.
    """
    points = len(grid)
    n = cfg.n_levels
    chain = cfg.chain_matrix()
    _, hi = feasible_bounds(
        cfg, prices, np.repeat(grid, n), np.tile(np.arange(n), points)
    )
    hi = hi.reshape(points, n)
    feasible = grid[None, None, :] <= hi[:, :, None] + 1e-12
    wealth_grid = (1.0 + prices.rent - cfg.delta) * grid[:, None] + prices.wage * (
        np.asarray(cfg.labor_levels)[None, :]
    )
    cons = wealth_grid[:, :, None] - grid[None, None, :]
    r = np.where(
        feasible, np.log1p(np.maximum(cons, 0.0)) / cfg.reward_scale, -np.inf
    )
    v = v0.copy()
    for _ in range(100_000):
        ev = v @ chain.T
        q = r + cfg.gamma * ev.T[None, :, :]
        v_next = q.max(axis=2)
        if np.abs(v_next - v).max() < tol:
            v = v_next
            break
        v = v_next
    ev = v @ chain.T
    return v, r + cfg.gamma * ev.T[None, :, :]


GIBBS_SUBGRID = 65
ORACLE_GRID_POWER = 2.0


def oracle_grid_nodes(points: int, b_max: float) -> np.ndarray:
    """Graded capital nodes b_max * u^2 on u = linspace(0, 1, points).

    Roughly half the stationary population sits in a spike just above the
    borrowing bound, so uniform nodes waste most of their resolution where
    nothing lives; quadratic grading puts it where the mass is. Doubling
    points-1 refines the family in place: every old node stays a node and
    each gap gains its parametric midpoint.
    """
    u = np.linspace(0.0, 1.0, points)
    return b_max * u**ORACLE_GRID_POWER


def _grid_gibbs(
    cfg: AiyagariConfig,
    prices: MeanFieldTerm,
    grid: np.ndarray,
    q: np.ndarray,
    zeta: float,
) -> np.ndarray:
    """Softmax policy as a row-stochastic matrix over grid nodes, (G, n, G).

    The density exp(Q/zeta) is evaluated on a Simpson sub-grid of each
    state's feasible interval and the quadrature mass is split linearly onto
    the two bracketing capital nodes. The split preserves total mass and the
    interval mean exactly, so narrow intervals (poorer than one node gap)
    still save on average half their wealth instead of being rounded to
    zero, which would otherwise fabricate a poverty trap at the rent clamp.
    The grid only needs to be strictly increasing; spacing may vary.
    """
    points = len(grid)
    n = q.shape[1]
    _, hi = feasible_bounds(
        cfg, prices, np.repeat(grid, n), np.tile(np.arange(n), points)
    )
    hi = hi.reshape(points, n)

    t = np.linspace(0.0, 1.0, GIBBS_SUBGRID)
    simpson = np.ones(GIBBS_SUBGRID)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0

    pmf = np.zeros((points, n, points))
    rows = np.arange(points)[:, None]
    cols = np.arange(points)[None, :]
    for w in range(n):
        actions = hi[:, w][:, None] * t[None, :]
        base = np.clip(
            np.searchsorted(grid, actions, side="right") - 1, 0, points - 2
        )
        frac = (actions - grid[base]) / (grid[base + 1] - grid[base])
        # forward-fill past the feasible prefix so interpolation right at the
        # interval end never mixes in the -inf padding
        count = (grid[None, :] <= hi[:, w][:, None] + 1e-12).sum(axis=1)
        q_level = q[:, w, :][rows, np.minimum(cols, count[:, None] - 1)]
        q_sub = (
            q_level[rows, base] * (1.0 - frac) + q_level[rows, base + 1] * frac
        )
        logits = (q_sub - q_sub.max(axis=1, keepdims=True)) / zeta
        mass = np.exp(logits) * simpson[None, :]
        mass /= mass.sum(axis=1, keepdims=True)
        np.add.at(pmf[:, w, :], (rows, base), mass * (1.0 - frac))
        np.add.at(pmf[:, w, :], (rows, base + 1), mass * frac)
    return pmf


def _stationary_distribution(
    policy_pmf: np.ndarray,
    chain: np.ndarray,
    mu0: np.ndarray,
    tol: float = 1e-13,
) -> np.ndarray:
    """Deterministic power iteration for the population over (grid, level)."""
    mu = mu0.copy()
    for _ in range(200_000):
        moved = np.einsum("iw,iwj->jw", mu, policy_pmf)
        mu_next = moved @ chain
        if np.abs(mu_next - mu).max() < tol:
            return mu_next
        mu = mu_next
    return mu


def reference_equilibrium(
    cfg: AiyagariConfig,
    *,
    grid_points: int | None = None,
    z0: MeanFieldTerm | None = None,
    tol: float = 1e-8,
    max_rounds: int = 500,
    vi_tol: float = 1e-10,
    phi_fn: PhiFn | None = None,
) -> MeanFieldTerm:
    """Compute the price fixed point by exact dynamic programming on a grid.

    One round: value iteration under the current prices, the softmax policy
    evaluated on the grid, the exact stationary population distribution
    under that policy, and a repricing at the firm's marginal products. No
    sampling is involved anywhere, so the result is deterministic and serves
    as the reference the Monte-Carlo solver is compared against. Capital
    nodes are graded quadratically (see oracle_grid_nodes), which is what
    keeps the fixed point stable under grid refinement.
    """
    points = grid_points if grid_points is not None else cfg.oracle_grid
    if points < 2:
        raise InvalidBounds(f"grid needs at least 2 points, got {points}")
    phi = phi_fn if phi_fn is not None else _default_phi
    grid = oracle_grid_nodes(points, cfg.b_max)
    chain = cfg.chain_matrix()
    labor = np.asarray(cfg.labor_levels, dtype=np.float64)
    stationary = chain_stationary(cfg)

    z = z0 if z0 is not None else MeanFieldTerm(cfg.wage_init, cfg.rent_init)
    v = np.zeros((points, cfg.n_levels))
    mu = np.full((points, cfg.n_levels), 1.0 / points) * stationary[None, :]
    delta = np.inf
    for _ in range(max_rounds):
        v, q = _grid_value_iteration(cfg, z, grid, v, vi_tol)
        pmf = _grid_gibbs(cfg, z, grid, q, cfg.zeta)
        mu = _stationary_distribution(pmf, chain, mu)
        indicators = AggregateIndicators(
            capital=float((mu.sum(axis=1) * grid).sum()),
            labor=float((mu.sum(axis=0) * labor).sum()),
        )
        wage_raw, rent_raw = phi(cfg, indicators)
        z_next = cfg.clamp_prices(wage_raw, rent_raw)
        delta = z_next.l1_distance(z)
        z = z_next
        if delta <= tol:
            return z
    raise OracleNoConvergence(
        f"no fixed point after {max_rounds} rounds; last increment {delta:.3e}"
    )


# ---------------------------------------------------------------------------
# trajectory CSV


def write_trajectory_csv(path: str | Path, result: EquilibriumResult) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRAJECTORY_COLUMNS)
        for rec in result.records:
            writer.writerow(
                [
                    rec.t,
                    repr(rec.wage),
                    repr(rec.rent),
                    repr(rec.delta_l1),
                    repr(rec.cfqi_mean_risk),
                    repr(rec.psi_capital),
                    repr(rec.psi_labor),
                    repr(rec.seconds),
                ]
            )


def read_trajectory_csv(path: str | Path) -> tuple[RoundRecord, ...]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = tuple(next(reader))
        if header != TRAJECTORY_COLUMNS:
            raise DimensionMismatch(
                f"unexpected trajectory header {header!r}"
            )
        records = [
            RoundRecord(
                int(row[0]),
                *(float(cell) for cell in row[1:]),
            )
            for row in reader
        ]
    return tuple(records)
