"""Convex fitted Q-iteration on a fixed batch of household transitions.

Each iteration regresses sampled Bellman targets clamp(r + gamma * JQ, 0, B)
onto a shape-constrained surrogate: per income level the map (b, a) ->
B - Q(b, w, a) is fit as a Lipschitz max-affine (hence convex) function, so
Q itself stays concave along every action slice and the downstream greedy
and Gibbs machinery can rely on that structure. The iteration count and
piece budget both scale with the dataset size.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, EmptyData, InvalidBounds
from .mdp import (
    ConcaveQ,
    Dataset,
    FeasibleFn,
    bellman_problem_joint,
    bellman_problems,
)
from .shape_reg import MaxAffineFn, fit_max_affine

MIN_ITERATIONS = 5
TRACE_COLUMNS = ("iter", "level", "risk", "epsilon", "sup_delta")


def default_iteration_count(sample_count: int, input_dim: int, gamma: float) -> int:
    """Iterations needed so the regression error dominates the horizon error.

    ceil((4 / (d + 4)) * ln M / ln(1 / gamma)), floored at 5: past that point
    extra iterations shrink the gamma^tau tail below the statistical error
    floor of a size-M fit in d dimensions, so more sweeps buy nothing.
    """
    if sample_count < 1:
        raise EmptyData(f"sample count must be positive, got {sample_count}")
    if input_dim < 1:
        raise InvalidBounds(f"input dim must be positive, got {input_dim}")
    if not (0.0 < gamma < 1.0):
        raise InvalidBounds(f"discount must lie in (0, 1), got {gamma}")
    rate = 4.0 / (input_dim + 4.0)
    raw = math.ceil(rate * math.log(sample_count) / math.log(1.0 / gamma))
    return max(MIN_ITERATIONS, raw)


@dataclass
class CfqiConfig:
    """Knobs for the fitted Q-iteration loop.

    tau=None picks the sample-size-dependent default. warm_restarts controls
    the reduced restart budget used from the second iteration on, where the
    previous surrogate seeds the search; None means max(2, restarts // 4).
    """

    tau: int | None = None
    restarts: int = 8
    max_sweeps: int = 50
    k_max: int = 64
    piece_count: int | None = None
    joint_fit: bool = False
    greedy_tol: float = 1e-8
    greedy_max_iter: int = 80
    warm_restarts: int | None = None

    def validate(self) -> None:
        if self.tau is not None and self.tau < 1:
            raise InvalidBounds(f"tau must be positive, got {self.tau}")
        if self.restarts < 1 or self.max_sweeps < 1 or self.k_max < 1:
            raise InvalidBounds("restarts, max_sweeps and k_max must be positive")
        if self.piece_count is not None and self.piece_count < 1:
            raise InvalidBounds(f"piece count must be positive, got {self.piece_count}")

    def warm_budget(self) -> int:
        if self.warm_restarts is not None:
            return max(1, self.warm_restarts)
        return max(2, self.restarts // 4)


@dataclass(frozen=True)
class TraceRecord:
    """One fitted level in one iteration; level is -1 for a joint fit."""

    iteration: int
    level: int
    risk: float
    epsilon: float
    sup_delta: float


@dataclass
class CfqiResult:
    q: ConcaveQ
    trace: list[TraceRecord] = field(default_factory=list)
    iterations: int = 0
    mean_risk: float = 0.0

    def final_records(self) -> list[TraceRecord]:
        return [t for t in self.trace if t.iteration == self.iterations]


def _zero_fn(input_dim: int, upper_bound: float, lipschitz: float) -> MaxAffineFn:
    return MaxAffineFn(
        slopes=np.zeros((1, input_dim)),
        intercepts=np.array([upper_bound]),
        lipschitz=lipschitz,
        upper_bound=upper_bound,
    )


def cfqi(
    data: Dataset,
    feasible: FeasibleFn,
    *,
    gamma: float,
    n_levels: int,
    upper_bound: float,
    lipschitz: float,
    config: CfqiConfig | None = None,
    rng: np.random.Generator | None = None,
    warm_start: ConcaveQ | None = None,
    level_values: np.ndarray | None = None,
) -> CfqiResult:
    """Run fitted Q-iteration and return the final concave Q with its trace.

    The value function starts at zero (or at warm_start), and every
    iteration refits the surrogates to fresh Bellman targets computed from
    the previous Q on the same dataset. Levels with no samples keep the
    zero fit; levels with too few samples to regress fall back the same way.
    sup_delta in the trace is the largest Q change across the dataset rows
    between consecutive iterations, a practical contraction monitor.
    """
    cfg = config if config is not None else CfqiConfig()
    cfg.validate()
    if len(data) == 0:
        raise EmptyData("cannot run fitted Q-iteration on an empty dataset")
    if not (0.0 < gamma < 1.0):
        raise InvalidBounds(f"discount must lie in (0, 1), got {gamma}")
    if n_levels < 1:
        raise InvalidBounds(f"need at least one income level, got {n_levels}")
    if cfg.joint_fit and level_values is None:
        raise DimensionMismatch("joint fit requires level_values")
    if data.income.max() >= n_levels or data.income_next.max() >= n_levels:
        raise DimensionMismatch("dataset income index exceeds the level count")
    rng = rng if rng is not None else np.random.default_rng()

    input_dim = 3 if cfg.joint_fit else 2
    tau = cfg.tau or default_iteration_count(len(data), input_dim, gamma)

    if warm_start is not None:
        q = warm_start
    elif cfg.joint_fit:
        q = ConcaveQ(
            level_fns=[],
            upper_bound=upper_bound,
            joint=_zero_fn(3, upper_bound, lipschitz),
            level_values=np.asarray(level_values, dtype=np.float64),
        )
    else:
        q = ConcaveQ.zero(n_levels, upper_bound, lipschitz)

    trace: list[TraceRecord] = []
    warned_levels: set[int] = set()
    last_risks: list[float] = []
    for iteration in range(1, tau + 1):
        restarts = cfg.restarts if iteration == 1 else cfg.warm_budget()
        prev = q
        last_risks = []
        if cfg.joint_fit:
            problem = bellman_problem_joint(
                data, q, gamma, feasible, lipschitz, level_values,
                piece_count=cfg.piece_count, k_max=cfg.k_max,
                tol=cfg.greedy_tol, max_iter=cfg.greedy_max_iter,
            )
            flipped = replace(problem, y=upper_bound - problem.y)
            fit = fit_max_affine(
                flipped, restarts=restarts, max_sweeps=cfg.max_sweeps,
                rng=rng, warm_start=prev.joint if iteration > 1 else None,
            )
            q = ConcaveQ(
                level_fns=[], upper_bound=upper_bound, joint=fit.fn,
                level_values=prev.level_values,
            )
            sup_delta = _sup_delta(prev, q, data)
            trace.append(TraceRecord(iteration, -1, fit.risk, fit.epsilon, sup_delta))
            last_risks.append(fit.risk)
            continue

        problems = bellman_problems(
            data, q, gamma, feasible, lipschitz,
            piece_count=cfg.piece_count, k_max=cfg.k_max,
            tol=cfg.greedy_tol, max_iter=cfg.greedy_max_iter,
        )
        fns: list[MaxAffineFn] = []
        records: list[tuple[int, float, float]] = []
        for level in range(n_levels):
            problem = problems.get(level)
            if problem is None or problem.sample_count < problem.input_dim + 2:
                if level not in warned_levels:
                    warnings.warn(
                        f"income level {level} has too few samples to fit; "
                        "keeping the zero value for it",
                        stacklevel=2,
                    )
                    warned_levels.add(level)
                fns.append(_zero_fn(2, upper_bound, lipschitz))
                records.append((level, 0.0, 0.0))
                continue
            flipped = replace(problem, y=upper_bound - problem.y)
            fit = fit_max_affine(
                flipped, restarts=restarts, max_sweeps=cfg.max_sweeps,
                rng=rng, warm_start=prev.level_fns[level] if iteration > 1 else None,
            )
            fns.append(fit.fn)
            records.append((level, fit.risk, fit.epsilon))
        q = ConcaveQ(level_fns=fns, upper_bound=upper_bound)
        sup_delta = _sup_delta(prev, q, data)
        for level, risk, epsilon in records:
            trace.append(TraceRecord(iteration, level, risk, epsilon, sup_delta))
            last_risks.append(risk)

    mean_risk = float(np.mean(last_risks)) if last_risks else 0.0
    return CfqiResult(q=q, trace=trace, iterations=tau, mean_risk=mean_risk)


def _sup_delta(prev: ConcaveQ, curr: ConcaveQ, data: Dataset) -> float:
    old = prev.value(data.capital, data.income, data.action)
    new = curr.value(data.capital, data.income, data.action)
    return float(np.max(np.abs(new - old)))


# ---------------------------------------------------------------------------
# trace persistence


def write_trace_csv(trace: list[TraceRecord], path: str) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            writer.writerow(
                [rec.iteration, rec.level, repr(rec.risk), repr(rec.epsilon),
                 repr(rec.sup_delta)]
            )


def read_trace_csv(path: str) -> list[TraceRecord]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise DimensionMismatch(f"unexpected trace header {header!r} in {path}")
        out = []
        for row in reader:
            if len(row) != len(TRACE_COLUMNS):
                raise DimensionMismatch(f"malformed trace row {row!r} in {path}")
            out.append(
                TraceRecord(
                    iteration=int(row[0]), level=int(row[1]), risk=float(row[2]),
                    epsilon=float(row[3]), sup_delta=float(row[4]),
                )
            )
        return out
