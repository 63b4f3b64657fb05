"""Household decision process: states, datasets, and the Bellman machinery.

The household state is (capital b, income level w) with savings action a;
next capital equals the savings choice, and income follows a finite chain.
Action values are represented concavely per income level as

    Q(b, w, a) = clamp(B - f_w(b, a), 0, B),

where f_w is a convex max-affine surrogate and B caps the discounted return.
Greedy one-step values maximize the unclamped concave restriction with
golden-section search and clamp afterwards, which is exact because the clamp
is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .errors import DimensionMismatch, EmptyData, EmptyInterval, InvalidBounds
from .shape_reg import MaxAffineFn, RegressionProblem, select_piece_count

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

# feasibility oracle: (capital array, income array) -> (lo array, hi array)
FeasibleFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class HouseholdState(NamedTuple):
    capital: float
    income: int


class TransitionSample(NamedTuple):
    capital: float
    income: int
    action: float
    reward: float
    capital_next: float
    income_next: int


@dataclass
class FeasibleInterval:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise EmptyInterval(f"feasible interval [{self.lo}, {self.hi}] is empty")


@dataclass(eq=False)
class Dataset:
    """Column-oriented batch of household transitions under fixed prices."""

    capital: np.ndarray
    income: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    capital_next: np.ndarray
    income_next: np.ndarray
    wage: float
    rent: float
    seed: int | None = None

    def __post_init__(self) -> None:
        self.capital = np.asarray(self.capital, dtype=np.float64)
        self.income = np.asarray(self.income, dtype=np.int64)
        self.action = np.asarray(self.action, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.capital_next = np.asarray(self.capital_next, dtype=np.float64)
        self.income_next = np.asarray(self.income_next, dtype=np.int64)
        n = self.capital.shape[0]
        for name in ("income", "action", "reward", "capital_next", "income_next"):
            if getattr(self, name).shape != (n,):
                raise DimensionMismatch(f"dataset column {name} misaligned")

    def __len__(self) -> int:
        return self.capital.shape[0]

    def row(self, i: int) -> TransitionSample:
        return TransitionSample(
            float(self.capital[i]),
            int(self.income[i]),
            float(self.action[i]),
            float(self.reward[i]),
            float(self.capital_next[i]),
            int(self.income_next[i]),
        )

    def rows(self) -> Iterator[TransitionSample]:
        return (self.row(i) for i in range(len(self)))


DATASET_COLUMNS = ("b", "w", "a", "r", "b_next", "w_next")


def write_dataset_csv(data: Dataset, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(DATASET_COLUMNS) + "\n")
        for s in data.rows():
            fh.write(
                f"{s.capital!r},{s.income},{s.action!r},{s.reward!r},"
                f"{s.capital_next!r},{s.income_next}\n"
            )


def read_dataset_csv(path: str, wage: float = 0.0, rent: float = 0.0) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(DATASET_COLUMNS):
            raise DimensionMismatch(f"unexpected dataset header {header!r}")
        cols: list[list[float]] = [[] for _ in DATASET_COLUMNS]
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(DATASET_COLUMNS):
                raise DimensionMismatch(f"bad dataset row {line!r}")
            for col, part in zip(cols, parts):
                col.append(float(part))
    return Dataset(
        capital=np.array(cols[0]),
        income=np.array(cols[1], dtype=np.int64),
        action=np.array(cols[2]),
        reward=np.array(cols[3]),
        capital_next=np.array(cols[4]),
        income_next=np.array(cols[5], dtype=np.int64),
        wage=wage,
        rent=rent,
    )


@dataclass(eq=False)
class ConcaveQ:
    """Per-income-level concave action values backed by convex surrogates.

    level_fns[w] is the convex surrogate f_w over (b, a). When joint is set,
    a single surrogate over (b, labor value, a) replaces the per-level list
    and level_values supplies the middle coordinate for each income index.
    """

    level_fns: list[MaxAffineFn]
    upper_bound: float
    joint: MaxAffineFn | None = None
    level_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.upper_bound) and self.upper_bound > 0):
            raise InvalidBounds(f"value cap must be positive, got {self.upper_bound}")
        if self.joint is None and not self.level_fns:
            raise EmptyData("ConcaveQ needs at least one income level")
        if self.joint is not None and self.level_values is None:
            raise DimensionMismatch("joint surrogate requires level_values")

    @property
    def n_levels(self) -> int:
        if self.joint is not None:
            return len(self.level_values)
        return len(self.level_fns)

    @classmethod
    def zero(cls, n_levels: int, upper_bound: float, lipschitz: float) -> "ConcaveQ":
        """The all-zero value function: surrogate identically B."""
        fns = [
            MaxAffineFn(
                slopes=np.zeros((1, 2)),
                intercepts=np.array([upper_bound]),
                lipschitz=lipschitz,
                upper_bound=upper_bound,
            )
            for _ in range(n_levels)
        ]
        return cls(level_fns=fns, upper_bound=upper_bound)

    def surrogate_values(
        self, capital: np.ndarray, income: np.ndarray, action: np.ndarray
    ) -> np.ndarray:
        """Unclamped B - f values, vectorized over aligned state/action arrays."""
        b = np.asarray(capital, dtype=np.float64)
        w = np.asarray(income, dtype=np.int64)
        a = np.asarray(action, dtype=np.float64)
        b, w, a = np.broadcast_arrays(b, w, a)
        out = np.empty(b.shape)
        if self.joint is not None:
            pts = np.stack(
                [b.ravel(), np.asarray(self.level_values)[w.ravel()], a.ravel()], axis=1
            )
            out = (self.upper_bound - self.joint.eval(pts)).reshape(b.shape)
            return out
        flat_b, flat_w, flat_a = b.ravel(), w.ravel(), a.ravel()
        flat_out = np.empty(flat_b.shape)
        for level, fn in enumerate(self.level_fns):
            mask = flat_w == level
            if mask.any():
                pts = np.stack([flat_b[mask], flat_a[mask]], axis=1)
                flat_out[mask] = self.upper_bound - fn.eval(pts)
        return flat_out.reshape(b.shape)

    def value(
        self, capital: np.ndarray, income: np.ndarray, action: np.ndarray
    ) -> np.ndarray:
        """Clamped Q values in [0, B]."""
        raw = self.surrogate_values(capital, income, action)
        return np.clip(raw, 0.0, self.upper_bound)

    def value_at(self, state: HouseholdState, action: float) -> float:
        return float(self.value(np.array([state.capital]), np.array([state.income]),
                                np.array([action]))[0])


def _golden_max_surrogate(
    slopes_a: np.ndarray,
    base: np.ndarray,
    upper_bound: float,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized golden-section max of g(a) = B - max_k(sa_k a + base_k).

    base is the (N, K) matrix of per-element per-piece constants (the fixed
    state coordinates folded into the intercepts), so g is the unclamped
    concave surrogate restricted to the action axis. Returns (max values,
    argmax locations), tracking the best point ever evaluated so early
    stopping can only lose bracket width, never a sampled value.
    """

    def g(a: np.ndarray) -> np.ndarray:
        return upper_bound - (base + a[:, None] * slopes_a[None, :]).max(axis=1)

    lo = lo.astype(np.float64).copy()
    hi = hi.astype(np.float64).copy()
    best_arg = lo.copy()
    best_val = g(lo)
    v_hi = g(hi)
    improve = v_hi > best_val
    best_arg[improve] = hi[improve]
    best_val = np.maximum(best_val, v_hi)

    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = g(x1), g(x2)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        keep_low = f1 >= f2
        # shrink to [lo, x2] where keep_low else [x1, hi]
        hi = np.where(keep_low, x2, hi)
        lo = np.where(keep_low, lo, x1)
        x2_new = np.where(keep_low, x1, lo + GOLDEN * (hi - lo))
        x1_new = np.where(keep_low, hi - GOLDEN * (hi - lo), x2)
        f2_new = np.where(keep_low, f1, 0.0)
        f1_new = np.where(keep_low, 0.0, f2)
        fresh = np.where(keep_low, x1_new, x2_new)
        f_fresh = g(fresh)
        f1 = np.where(keep_low, f_fresh, f1_new)
        f2 = np.where(keep_low, f2_new, f_fresh)
        improve = f_fresh > best_val
        best_arg[improve] = fresh[improve]
        best_val = np.maximum(best_val, f_fresh)
        x1, x2 = x1_new, x2_new
    mid = (lo + hi) / 2.0
    f_mid = g(mid)
    improve = f_mid > best_val
    best_arg[improve] = mid[improve]
    best_val = np.maximum(best_val, f_mid)
    return best_val, best_arg


def greedy_values(
    q: ConcaveQ,
    capital: np.ndarray,
    income: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    *,
    tol: float = 1e-8,
    max_iter: int = 80,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sup_a Q(b, w, a) over [lo, hi], with maximizing actions.

    Golden section runs on the unclamped concave surrogate B - f and the
    result is clamped to [0, B]; clamp(max) = max(clamp) since the clamp is
    monotone. tol=0 runs the full iteration budget, which brackets the
    maximizer to ~width * 0.618^max_iter and is what the exactness tests use.
    """
    b = np.asarray(capital, dtype=np.float64)
    w = np.asarray(income, dtype=np.int64)
    lo_arr = np.asarray(lo, dtype=np.float64)
    hi_arr = np.asarray(hi, dtype=np.float64)
    if not (b.shape == w.shape == lo_arr.shape == hi_arr.shape):
        raise DimensionMismatch("greedy_values needs aligned 1-D arrays")
    if np.any(lo_arr > hi_arr):
        raise EmptyInterval("greedy interval with lo > hi")
    values = np.empty(b.shape)
    argmax = np.empty(b.shape)
    joint = q.joint is not None
    for level in range(q.n_levels):
        mask = w == level
        if not mask.any():
            continue
        if joint:
            fn = q.joint
            coord = float(np.asarray(q.level_values)[level])
            base = (
                b[mask, None] * fn.slopes[None, :, 0]
                + coord * fn.slopes[None, :, 1]
                + fn.intercepts[None, :]
            )
            slopes_a = fn.slopes[:, 2]
        else:
            fn = q.level_fns[level]
            base = b[mask, None] * fn.slopes[None, :, 0] + fn.intercepts[None, :]
            slopes_a = fn.slopes[:, 1]
        raw, arg = _golden_max_surrogate(
            slopes_a, base, q.upper_bound, lo_arr[mask], hi_arr[mask], tol, max_iter
        )
        values[mask] = raw
        argmax[mask] = arg
    return np.clip(values, 0.0, q.upper_bound), argmax


def greedy_value(
    q: ConcaveQ,
    state: HouseholdState,
    interval: FeasibleInterval,
    *,
    tol: float = 1e-8,
    max_iter: int = 80,
) -> tuple[float, float]:
    """Scalar greedy value and maximizer for one state."""
    values, argmax = greedy_values(
        q,
        np.array([state.capital]),
        np.array([state.income]),
        np.array([interval.lo]),
        np.array([interval.hi]),
        tol=tol,
        max_iter=max_iter,
    )
    return float(values[0]), float(argmax[0])


def bellman_target_values(
    data: Dataset,
    q: ConcaveQ,
    gamma: float,
    feasible: FeasibleFn,
    *,
    tol: float = 1e-8,
    max_iter: int = 80,
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled Bellman targets clamp(r + gamma * JQ(s'), 0, B) per row.

    Returns (targets, next-state maximizing actions) aligned with the data.
    """
    if len(data) == 0:
        raise EmptyData("cannot build Bellman targets from an empty dataset")
    if not (0.0 < gamma < 1.0):
        raise InvalidBounds(f"discount must lie in (0, 1), got {gamma}")
    lo, hi = feasible(data.capital_next, data.income_next)
    continuation, argmax = greedy_values(
        q, data.capital_next, data.income_next, lo, hi, tol=tol, max_iter=max_iter
    )
    targets = np.clip(data.reward + gamma * continuation, 0.0, q.upper_bound)
    return targets, argmax


def bellman_problems(
    data: Dataset,
    q: ConcaveQ,
    gamma: float,
    feasible: FeasibleFn,
    lipschitz: float,
    *,
    piece_count: int | None = None,
    k_max: int = 64,
    tol: float = 1e-8,
    max_iter: int = 80,
) -> dict[int, RegressionProblem]:
    """Per-income-level regression problems with Bellman target responses.

    Targets stay on the Q scale; the fitted-Q loop flips them to B - t before
    fitting the convex surrogate. Levels absent from the dataset are simply
    missing from the returned dict.
    """
    targets, _ = bellman_target_values(
        data, q, gamma, feasible, tol=tol, max_iter=max_iter
    )
    problems: dict[int, RegressionProblem] = {}
    for level in np.unique(data.income):
        mask = data.income == level
        x = np.stack([data.capital[mask], data.action[mask]], axis=1)
        count = piece_count or select_piece_count(int(mask.sum()), 2, k_max=k_max)
        problems[int(level)] = RegressionProblem(
            x=x,
            y=targets[mask],
            piece_count=count,
            lipschitz=lipschitz,
            upper_bound=q.upper_bound,
        )
    return problems


def bellman_problem_joint(
    data: Dataset,
    q: ConcaveQ,
    gamma: float,
    feasible: FeasibleFn,
    lipschitz: float,
    level_values: np.ndarray,
    *,
    piece_count: int | None = None,
    k_max: int = 64,
    tol: float = 1e-8,
    max_iter: int = 80,
) -> RegressionProblem:
    """Single d=3 regression problem embedding the income level coordinate."""
    targets, _ = bellman_target_values(
        data, q, gamma, feasible, tol=tol, max_iter=max_iter
    )
    coords = np.asarray(level_values, dtype=np.float64)[data.income]
    x = np.stack([data.capital, coords, data.action], axis=1)
    count = piece_count or select_piece_count(len(data), 3, k_max=k_max)
    return RegressionProblem(
        x=x, y=targets, piece_count=count, lipschitz=lipschitz,
        upper_bound=q.upper_bound,
    )
