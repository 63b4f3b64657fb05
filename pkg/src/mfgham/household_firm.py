"""The Bewley-Aiyagari economy: households, the firm, and aggregation.

Households hold capital b in [0, b_max], supply labor according to a finite
income chain, and choose savings a subject to the budget
consumption = (1 + rent - delta) * b + wage * labor - a >= 0. Utility is
log(1 + consumption), normalized by its maximum over the price box so
rewards live in [0, 1]. The representative firm prices factors at marginal
products of Cobb-Douglas production K^alpha N^(1-alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, InfeasibleAction, InvalidBounds
from .mdp import Dataset, FeasibleFn

TABLE_CAPITAL_POINTS = 1024


@dataclass(frozen=True)
class MeanFieldTerm:
    """A (wage, rent) price pair, the mean-field object of the economy."""

    wage: float
    rent: float

    def as_array(self) -> np.ndarray:
        return np.array([self.wage, self.rent])

    def l1_distance(self, other: "MeanFieldTerm") -> float:
        return abs(self.wage - other.wage) + abs(self.rent - other.rent)


@dataclass(frozen=True)
class AggregateIndicators:
    """Time-and-population averages produced by the simulation step."""

    capital: float
    labor: float


@dataclass
class AiyagariConfig:
    """Calibration and solver-facing environment constants.

    The defaults are a conventional quarterly-ish calibration; every field
    can be overridden through the flat key=value config file.
    """

    alpha: float = 0.36
    delta: float = 0.08
    gamma: float = 0.95
    zeta: float = 2.0
    b_max: float = 20.0
    labor_levels: tuple[float, ...] = (0.0, 1.0)
    chain: tuple[tuple[float, ...], ...] = ((0.9, 0.1), (0.1, 0.9))
    wage_min: float = 0.05
    wage_max: float = 5.0
    rent_min: float = 0.01
    rent_max: float = 1.0
    k_min: float = 1e-3
    n_min: float = 1e-3
    population: int = 10_000
    horizon: int = 200
    burn_in: int = 100
    wage_init: float = 1.0
    rent_init: float = 0.1
    oracle_grid: int = 400

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise InvalidBounds(f"capital share must be in (0,1), got {self.alpha}")
        if not (0.0 <= self.delta <= 1.0):
            raise InvalidBounds(f"depreciation must be in [0,1], got {self.delta}")
        if not (0.0 < self.gamma < 1.0):
            raise InvalidBounds(f"discount must be in (0,1), got {self.gamma}")
        if not (self.zeta > 0.0):
            raise InvalidBounds(f"temperature must be positive, got {self.zeta}")
        if not (self.b_max > 0.0):
            raise InvalidBounds(f"capital cap must be positive, got {self.b_max}")
        if not (0.0 < self.wage_min < self.wage_max):
            raise InvalidBounds("wage box must satisfy 0 < min < max")
        if not (0.0 < self.rent_min < self.rent_max):
            raise InvalidBounds("rent box must satisfy 0 < min < max")
        if len(self.labor_levels) < 1:
            raise InvalidBounds("need at least one labor level")
        rows = np.asarray(self.chain, dtype=np.float64)
        if rows.shape != (len(self.labor_levels), len(self.labor_levels)):
            raise InvalidBounds("income chain shape must match the labor levels")
        if rows.min() < 0.0 or np.abs(rows.sum(axis=1) - 1.0).max() > 1e-9:
            raise InvalidBounds("income chain rows must be distributions")
        if self.population < 1 or self.horizon < 1:
            raise InvalidBounds("population and horizon must be positive")
        if not (0 <= self.burn_in < self.horizon):
            raise InvalidBounds("burn-in must lie inside the horizon")
        if self.oracle_grid < 3:
            raise InvalidBounds("oracle grid needs at least 3 points")

    # -- derived constants ---------------------------------------------------

    @property
    def n_levels(self) -> int:
        return len(self.labor_levels)

    @property
    def value_cap(self) -> float:
        """B = 1 / (1 - gamma), the sup of any discounted reward sum."""
        return 1.0 / (1.0 - self.gamma)

    @property
    def consumption_cap(self) -> float:
        return (1.0 + self.rent_max - self.delta) * self.b_max + self.wage_max * max(
            self.labor_levels
        )

    @property
    def reward_scale(self) -> float:
        return math.log1p(self.consumption_cap)

    def reward_lipschitz(self, joint: bool = False) -> float:
        """Sup-norm reward slope over the price box (per coordinate)."""
        db = 1.0 + self.rent_max - self.delta
        dn = self.wage_max if joint else 0.0
        return max(db, dn, 1.0) / self.reward_scale

    def value_lipschitz(self, joint: bool = False) -> float:
        return self.reward_lipschitz(joint) / (1.0 - self.gamma)

    def chain_matrix(self) -> np.ndarray:
        return np.asarray(self.chain, dtype=np.float64)

    def price_box(self) -> tuple[float, float, float, float]:
        return self.wage_min, self.wage_max, self.rent_min, self.rent_max

    def clamp_prices(self, wage: float, rent: float) -> MeanFieldTerm:
        return MeanFieldTerm(
            wage=min(max(wage, self.wage_min), self.wage_max),
            rent=min(max(rent, self.rent_min), self.rent_max),
        )


# ---------------------------------------------------------------------------
# config file mapping

_FIELD_TYPES = {f.name: f.type for f in fields(AiyagariConfig)}


def _format_value(name: str, value) -> str:
    if name == "labor_levels":
        return ",".join(repr(float(v)) for v in value)
    if name == "chain":
        return ";".join(",".join(repr(float(v)) for v in row) for row in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str):
    try:
        if name == "labor_levels":
            return tuple(float(v) for v in raw.split(","))
        if name == "chain":
            return tuple(tuple(float(v) for v in row.split(",")) for row in raw.split(";"))
        if name in ("population", "horizon", "burn_in", "oracle_grid"):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config value {name} = {raw!r}") from exc


def config_to_mapping(cfg: AiyagariConfig) -> dict[str, str]:
    return {f.name: _format_value(f.name, getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_mapping(mapping: dict[str, str]) -> AiyagariConfig:
    """Build a config from string overrides of the defaults."""
    kwargs = {}
    for name, raw in mapping.items():
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {name!r}")
        kwargs[name] = _parse_value(name, raw)
    try:
        return AiyagariConfig(**kwargs)
    except InvalidBounds as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# household primitives


def wealth(cfg: AiyagariConfig, prices: MeanFieldTerm, capital, income) -> np.ndarray:
    """Resources on hand: (1 + rent - delta) b + wage * labor."""
    b = np.asarray(capital, dtype=np.float64)
    w = np.asarray(income, dtype=np.int64)
    labor = np.asarray(cfg.labor_levels, dtype=np.float64)[w]
    return (1.0 + prices.rent - cfg.delta) * b + prices.wage * labor


def feasible_bounds(
    cfg: AiyagariConfig, prices: MeanFieldTerm, capital, income
) -> tuple[np.ndarray, np.ndarray]:
    """Feasible savings interval [0, min(b_max, wealth)] per state."""
    rich = wealth(cfg, prices, capital, income)
    return np.zeros_like(rich), np.minimum(cfg.b_max, rich)


def make_feasible_fn(cfg: AiyagariConfig, prices: MeanFieldTerm) -> FeasibleFn:
    def fn(capital: np.ndarray, income: np.ndarray):
        return feasible_bounds(cfg, prices, capital, income)

    return fn


def reward(cfg: AiyagariConfig, prices: MeanFieldTerm, capital, income, action):
    """Normalized log utility of consumption implied by the savings choice."""
    b = np.asarray(capital, dtype=np.float64)
    w = np.asarray(income, dtype=np.int64)
    a = np.asarray(action, dtype=np.float64)
    scalar = b.ndim == 0
    b, w, a = np.atleast_1d(b), np.atleast_1d(w), np.atleast_1d(a)
    lo, hi = feasible_bounds(cfg, prices, b, w)
    if np.any(a < lo - 1e-9) or np.any(a > hi + 1e-9):
        bad = int(np.argmax((a < lo - 1e-9) | (a > hi + 1e-9)))
        raise InfeasibleAction(
            f"savings {a[bad]} outside [{lo[bad]}, {hi[bad]}] at state "
            f"(b={b[bad]}, w={int(w[bad])})"
        )
    consumption = np.maximum(wealth(cfg, prices, b, w) - a, 0.0)
    values = np.log1p(consumption) / cfg.reward_scale
    return float(values[0]) if scalar else values


def income_step(
    cfg: AiyagariConfig, income: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One categorical transition of the income chain for each household."""
    w = np.asarray(income, dtype=np.int64)
    cum = np.cumsum(cfg.chain_matrix(), axis=1)
    u = rng.uniform(size=w.shape)
    return (cum[w] < u[..., None]).sum(axis=-1).astype(np.int64)


def chain_stationary(cfg: AiyagariConfig) -> np.ndarray:
    """Stationary distribution of the income chain (left eigenvector)."""
    mat = cfg.chain_matrix()
    vals, vecs = np.linalg.eig(mat.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


# ---------------------------------------------------------------------------
# dataset generation and aggregation


def sample_dataset(
    cfg: AiyagariConfig,
    prices: MeanFieldTerm,
    sample_count: int,
    seed: int | np.random.Generator | None = None,
) -> Dataset:
    """Exploratory transitions: uniform states, uniform feasible savings."""
    if sample_count < 1:
        raise InvalidBounds(f"sample count must be positive, got {sample_count}")
    rng = (
        seed
        if isinstance(seed, np.random.Generator)
        else np.random.default_rng(seed)
    )
    b = rng.uniform(0.0, cfg.b_max, sample_count)
    w = rng.integers(0, cfg.n_levels, sample_count)
    lo, hi = feasible_bounds(cfg, prices, b, w)
    a = lo + rng.uniform(size=sample_count) * (hi - lo)
    r = reward(cfg, prices, b, w, a)
    w_next = income_step(cfg, w, rng)
    return Dataset(
        capital=b,
        income=w,
        action=a,
        reward=r,
        capital_next=a.copy(),
        income_next=w_next,
        wage=prices.wage,
        rent=prices.rent,
        seed=seed if isinstance(seed, int) else None,
    )


def aggregate_psi(
    cfg: AiyagariConfig,
    prices: MeanFieldTerm,
    policy,
    rng: np.random.Generator | None = None,
    *,
    exact_sampling: bool = False,
) -> AggregateIndicators:
    """Simulate the household population and average capital and labor.

    Households start from b ~ U[0, b_max] and the chain's stationary income
    mix, run `horizon` steps under the given policy, and contribute their
    capital and labor to the averages once the burn-in has passed. Policies
    exposing quantile_table are sampled through a per-level bilinear table
    (rebuilt once per call) unless exact_sampling forces the per-household
    inverse-CDF path.
    """
    rng = rng if rng is not None else np.random.default_rng()
    labor = np.asarray(cfg.labor_levels, dtype=np.float64)
    b = rng.uniform(0.0, cfg.b_max, cfg.population)
    stationary = chain_stationary(cfg)
    w = rng.choice(cfg.n_levels, size=cfg.population, p=stationary)

    sampler = policy
    if not exact_sampling and hasattr(policy, "quantile_table"):
        grid = np.linspace(0.0, cfg.b_max, TABLE_CAPITAL_POINTS)
        sampler = policy.quantile_table(grid)

    capital_sum = 0.0
    labor_sum = 0.0
    kept = 0
    for step in range(cfg.horizon):
        if step >= cfg.burn_in:
            capital_sum += float(b.mean())
            labor_sum += float(labor[w].mean())
            kept += 1
        b = np.asarray(sampler.sample_batch(b, w, rng), dtype=np.float64)
        w = income_step(cfg, w, rng)
    return AggregateIndicators(capital=capital_sum / kept, labor=labor_sum / kept)


# ---------------------------------------------------------------------------
# the firm


def marginal_products(cfg: AiyagariConfig, capital: float, labor: float) -> tuple[float, float]:
    """Cobb-Douglas factor prices at floored aggregates (wage, rent)."""
    k = max(float(capital), cfg.k_min)
    n = max(float(labor), cfg.n_min)
    rent = cfg.alpha * k ** (cfg.alpha - 1.0) * n ** (1.0 - cfg.alpha)
    wage = (1.0 - cfg.alpha) * k**cfg.alpha * n ** (-cfg.alpha)
    return wage, rent


def production_phi(
    cfg: AiyagariConfig, indicators: AggregateIndicators
) -> MeanFieldTerm:
    """Price response: marginal products clamped into the price box."""
    wage, rent = marginal_products(cfg, indicators.capital, indicators.labor)
    return cfg.clamp_prices(wage, rent)


def default_config() -> AiyagariConfig:
    return AiyagariConfig()


def with_overrides(cfg: AiyagariConfig, **kwargs) -> AiyagariConfig:
    return replace(cfg, **kwargs)
