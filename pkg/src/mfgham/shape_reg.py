"""Lipschitz-bounded max-affine regression and its input-convex network form.

A max-affine function h(x) = max_k (alpha_k . x + c_k) is the workhorse
function class of the whole solver: it is convex by construction, its slopes
can be box-clamped to enforce an L-infinity Lipschitz bound, and fitting it
by alternating between partition assignment and per-piece least squares is
cheap enough to sit inside a fitted Q-iteration inner loop.

The same class admits an exact reparameterization as a K-layer input-convex
neural network with one hidden unit per layer, nonnegative input weights on
the doubled input (x, -x), and unit passthrough weights; the network output
equals max(0, h(x)). Both directions of that conversion are implemented here
and are exact up to floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyData,
    InvalidBounds,
    InvariantViolation,
)

DEFAULT_PIECE_CAP = 64


def _as_points(x: np.ndarray, input_dim: int) -> np.ndarray:
    """Coerce x to a (N, input_dim) float array, accepting a single point."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != input_dim:
        raise DimensionMismatch(
            f"expected points with {input_dim} coordinates, got shape {arr.shape}"
        )
    return arr


def _check_bounds(lipschitz: float, upper_bound: float) -> None:
    if not (np.isfinite(lipschitz) and lipschitz > 0.0):
        raise InvalidBounds(f"lipschitz bound must be finite and positive, got {lipschitz}")
    if not (np.isfinite(upper_bound) and upper_bound > 0.0):
        raise InvalidBounds(f"value bound must be finite and positive, got {upper_bound}")


@dataclass(eq=False)
class MaxAffineFn:
    """Pointwise maximum of K affine pieces with an L-infinity slope bound.

    slopes has shape (K, d), intercepts shape (K,). Values are not clamped
    here; the Bellman machinery applies its own [0, B] clamp at evaluation
    time, which is where the bound semantics of upper_bound live.
    """

    slopes: np.ndarray
    intercepts: np.ndarray
    lipschitz: float
    upper_bound: float

    def __post_init__(self) -> None:
        self.slopes = np.atleast_2d(np.asarray(self.slopes, dtype=np.float64))
        self.intercepts = np.atleast_1d(np.asarray(self.intercepts, dtype=np.float64))
        if self.slopes.ndim != 2 or self.intercepts.ndim != 1:
            raise DimensionMismatch("slopes must be (K, d) and intercepts (K,)")
        if self.slopes.shape[0] != self.intercepts.shape[0]:
            raise DimensionMismatch(
                f"piece count mismatch: {self.slopes.shape[0]} slopes vs "
                f"{self.intercepts.shape[0]} intercepts"
            )
        if self.slopes.shape[0] == 0:
            raise EmptyData("a max-affine function needs at least one piece")
        _check_bounds(self.lipschitz, self.upper_bound)

    @property
    def piece_count(self) -> int:
        return self.slopes.shape[0]

    @property
    def input_dim(self) -> int:
        return self.slopes.shape[1]

    def piece_values(self, x: np.ndarray) -> np.ndarray:
        """Affine values of every piece at every point, shape (N, K)."""
        pts = _as_points(x, self.input_dim)
        return pts @ self.slopes.T + self.intercepts

    def eval(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the max-affine function at one point or a batch.

        Returns a scalar for a single (d,) point, else a (N,) array.
        """
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        out = self.piece_values(arr).max(axis=1)
        return float(out[0]) if single else out

    __call__ = eval

    def validate(self) -> None:
        """Raise InvariantViolation if the slope bound is broken."""
        sup = float(np.abs(self.slopes).max())
        if sup > self.lipschitz + 1e-12:
            raise InvariantViolation(
                f"slope sup-norm {sup} exceeds Lipschitz bound {self.lipschitz}"
            )


@dataclass(eq=False)
class RegressionProblem:
    """Inputs, targets, and class parameters for one max-affine fit."""

    x: np.ndarray
    y: np.ndarray
    piece_count: int
    lipschitz: float
    upper_bound: float

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if self.x.ndim != 2 or self.y.ndim != 1:
            raise DimensionMismatch("x must be (M, d) and y (M,)")
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(
                f"{self.x.shape[0]} inputs but {self.y.shape[0]} targets"
            )
        if self.x.shape[0] == 0:
            raise EmptyData("regression problem has no samples")
        if self.piece_count < 1:
            raise InvalidBounds(f"piece count must be >= 1, got {self.piece_count}")
        _check_bounds(self.lipschitz, self.upper_bound)

    @property
    def sample_count(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


@dataclass(eq=False)
class MaxAffineFit:
    """A fitted function plus the diagnostics the inner loop logs."""

    fn: MaxAffineFn
    risk: float
    epsilon: float
    restart_risks: list[float] = field(default_factory=list)
    sweeps: int = 0


def select_piece_count(sample_count: int, input_dim: int, k_max: int = DEFAULT_PIECE_CAP) -> int:
    """Piece budget K = ceil(M^(d/(d+4))), floored at 1 and capped at k_max."""
    if sample_count < 1:
        raise EmptyData(f"sample count must be >= 1, got {sample_count}")
    if input_dim < 1:
        raise InvalidBounds(f"input dim must be >= 1, got {input_dim}")
    k = math.ceil(sample_count ** (input_dim / (input_dim + 4.0)))
    return max(1, min(int(k), int(k_max)))


def empirical_risk(fn: MaxAffineFn, x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error of fn on the given sample."""
    resid = fn.eval(np.atleast_2d(x)) - y
    return float(np.mean(resid * resid))


def _piece_ols(
    sx: np.ndarray, sy: np.ndarray, lipschitz: float
) -> tuple[np.ndarray, float]:
    """Ridge-damped least squares for one affine piece, slope clamp included.

    Solving in centered coordinates keeps the intercept out of the ridge
    penalty and makes the post-clamp intercept re-solve a one-liner:
    the optimal intercept for a fixed slope is always ybar - slope . xbar.
    """
    m, d = sx.shape
    xbar = sx.mean(axis=0)
    ybar = sy.mean()
    xc = sx - xbar
    gram = xc.T @ xc + (1e-9 * m) * np.eye(d)
    try:
        slope = np.linalg.solve(gram, xc.T @ (sy - ybar))
    except np.linalg.LinAlgError:
        slope = np.linalg.lstsq(gram, xc.T @ (sy - ybar), rcond=None)[0]
    slope = np.clip(slope, -lipschitz, lipschitz)
    return slope, float(ybar - slope @ xbar)


def fit_affine_ols(problem: RegressionProblem) -> MaxAffineFn:
    """Global affine least squares, returned as a one-piece max-affine fn."""
    slope, intercept = _piece_ols(problem.x, problem.y, problem.lipschitz)
    return MaxAffineFn(
        slopes=slope[None, :],
        intercepts=np.array([intercept]),
        lipschitz=problem.lipschitz,
        upper_bound=problem.upper_bound,
    )


def _refit_pieces(
    problem: RegressionProblem,
    assign: np.ndarray,
    slopes: np.ndarray,
    intercepts: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-piece least squares given an assignment; respawn empty pieces.

    All pieces are solved in one shot: segmented sums over the assignment
    labels build every centered gram matrix at once, and a batched solve
    replaces the per-piece loop (the inner loop of the whole fit, so this
    path is kept free of per-piece python overhead). An empty piece is
    re-anchored at the sample the current envelope underfits the most,
    reusing the slope active there so the new piece is tangent-like and
    immediately active at that sample.
    """
    k = slopes.shape[0]
    x, y = problem.x, problem.y
    d = x.shape[1]
    counts = np.bincount(assign, minlength=k)
    filled = counts > 0
    safe = np.maximum(counts, 1).astype(np.float64)
    xbar = np.stack(
        [np.bincount(assign, weights=x[:, j], minlength=k) for j in range(d)], axis=1
    ) / safe[:, None]
    ybar = np.bincount(assign, weights=y, minlength=k) / safe
    xc = x - xbar[assign]
    yc = y - ybar[assign]
    gram = np.empty((k, d, d))
    for i in range(d):
        for j in range(i, d):
            v = np.bincount(assign, weights=xc[:, i] * xc[:, j], minlength=k)
            gram[:, i, j] = v
            gram[:, j, i] = v
    diag = np.arange(d)
    gram[:, diag, diag] += (1e-9 * safe)[:, None]
    rhs = np.stack(
        [np.bincount(assign, weights=xc[:, j] * yc, minlength=k) for j in range(d)],
        axis=1,
    )
    try:
        sol = np.linalg.solve(gram[filled], rhs[filled][..., None])[..., 0]
    except np.linalg.LinAlgError:  # the ridge term normally prevents this
        sol = np.stack(
            [np.linalg.lstsq(g, r, rcond=None)[0]
             for g, r in zip(gram[filled], rhs[filled])]
        )
    sol = np.clip(sol, -problem.lipschitz, problem.lipschitz)
    new_slopes = slopes.copy()
    new_intercepts = intercepts.copy()
    new_slopes[filled] = sol
    new_intercepts[filled] = ybar[filled] - (sol * xbar[filled]).sum(axis=1)
    if not filled.all():
        empty = np.flatnonzero(~filled)
        vals = x @ new_slopes.T + new_intercepts
        resid = y - vals.max(axis=1)
        need = min(len(empty), len(resid))
        top = np.argpartition(resid, -need)[-need:]
        order = top[np.argsort(resid[top])[::-1]]
        active = vals.argmax(axis=1)
        for rank, piece in enumerate(empty):
            i = order[rank % len(order)]
            new_slopes[piece] = new_slopes[active[i]]
            new_intercepts[piece] = y[i] - new_slopes[piece] @ x[i]
    return new_slopes, new_intercepts


def _alternate(
    problem: RegressionProblem,
    slopes: np.ndarray,
    intercepts: np.ndarray,
    max_sweeps: int,
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Alternating partition least squares from one initialization.

    Returns the best parameters seen over the sweep sequence (the iteration
    is not monotone in risk once reassignment and slope clamping act, so we
    keep a running argmin instead of trusting the last iterate). Two stop
    rules: an assignment fixpoint (the classical stationarity condition),
    or no new best risk for several sweeps, which catches the respawn
    cycles that otherwise churn until the sweep cap without improving.
    """
    patience = 10
    best_slopes, best_intercepts = slopes.copy(), intercepts.copy()
    best_risk = np.inf
    stale = 0
    assign_prev: np.ndarray | None = None
    sweeps_done = 0
    for sweep in range(max_sweeps):
        vals = problem.x @ slopes.T + intercepts
        resid = vals.max(axis=1) - problem.y
        risk = float(np.mean(resid * resid))
        if risk < best_risk:
            best_risk = risk
            best_slopes, best_intercepts = slopes.copy(), intercepts.copy()
            stale = 0
        else:
            stale += 1
        assign = vals.argmax(axis=1)
        sweeps_done = sweep + 1
        if assign_prev is not None and np.array_equal(assign, assign_prev):
            break
        if stale >= patience:
            break
        slopes, intercepts = _refit_pieces(problem, assign, slopes, intercepts)
        assign_prev = assign
    return best_slopes, best_intercepts, best_risk, sweeps_done


def _ordered_split_init(
    problem: RegressionProblem, order: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Fit pieces on K near-equal contiguous chunks of an ordered sample."""
    slopes = np.zeros((k, problem.input_dim))
    intercepts = np.zeros(k)
    chunks = np.array_split(order, k)
    for piece, idx in enumerate(chunks):
        if idx.size == 0:
            idx = order[-1:]
        slopes[piece], intercepts[piece] = _piece_ols(
            problem.x[idx], problem.y[idx], problem.lipschitz
        )
    return slopes, intercepts


def _voronoi_init(
    problem: RegressionProblem, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Local least squares around K random anchors (finite-difference slopes)."""
    m = problem.sample_count
    anchors = rng.choice(m, size=min(k, m), replace=False)
    # nearest-anchor cells in input space
    d2 = ((problem.x[:, None, :] - problem.x[anchors][None, :, :]) ** 2).sum(axis=2)
    cell = d2.argmin(axis=1)
    slopes = np.zeros((k, problem.input_dim))
    intercepts = np.zeros(k)
    for piece in range(k):
        idx = np.flatnonzero(cell == (piece % anchors.size))
        if idx.size == 0:
            idx = np.array([anchors[piece % anchors.size]])
        slopes[piece], intercepts[piece] = _piece_ols(
            problem.x[idx], problem.y[idx], problem.lipschitz
        )
    return slopes, intercepts


def fit_max_affine(
    problem: RegressionProblem,
    *,
    restarts: int = 8,
    max_sweeps: int = 50,
    rng: np.random.Generator | None = None,
    warm_start: MaxAffineFn | None = None,
) -> MaxAffineFit:
    """Fit a Lipschitz-clamped max-affine function by alternating partitions.

    One restart is always seeded from the global affine fit (samples split
    along its prediction direction); the remaining restarts use local least
    squares around random anchors. The affine fit itself is kept as a
    candidate, so the returned risk never exceeds the fit_affine_ols risk.
    A warm_start function, when given, contributes one extra restart seeded
    from its pieces; the fitted-Q loop uses that to track slowly moving
    targets without paying for a full cold search every round.
    """
    if problem.sample_count < problem.input_dim + 2:
        raise EmptyData(
            f"need at least {problem.input_dim + 2} samples to fit, "
            f"got {problem.sample_count}"
        )
    if restarts < 1:
        raise InvalidBounds(f"restarts must be >= 1, got {restarts}")
    rng = rng if rng is not None else np.random.default_rng()
    k = min(problem.piece_count, problem.sample_count)

    affine = fit_affine_ols(problem)
    affine_risk = empirical_risk(affine, problem.x, problem.y)

    inits: list[tuple[np.ndarray, np.ndarray]] = []
    if warm_start is not None and warm_start.input_dim == problem.input_dim:
        ws, wi = warm_start.slopes, warm_start.intercepts
        if ws.shape[0] < k:  # pad by duplicating the last piece
            pad = k - ws.shape[0]
            ws = np.vstack([ws, np.repeat(ws[-1:], pad, axis=0)])
            wi = np.concatenate([wi, np.repeat(wi[-1:], pad)])
        inits.append((ws[:k].copy(), wi[:k].copy()))
    order = np.argsort(problem.x @ affine.slopes[0], kind="stable")
    inits.append(_ordered_split_init(problem, order, k))
    while len(inits) < restarts + (warm_start is not None):
        inits.append(_voronoi_init(problem, k, rng))

    best_slopes, best_intercepts = affine.slopes, affine.intercepts
    best_risk = affine_risk
    restart_risks: list[float] = []
    total_sweeps = 0
    for slopes0, intercepts0 in inits:
        slopes, intercepts, risk, sweeps = _alternate(
            problem, slopes0, intercepts0, max_sweeps
        )
        restart_risks.append(risk)
        total_sweeps += sweeps
        if risk < best_risk:
            best_risk = risk
            best_slopes, best_intercepts = slopes, intercepts

    fn = MaxAffineFn(
        slopes=best_slopes,
        intercepts=best_intercepts,
        lipschitz=problem.lipschitz,
        upper_bound=problem.upper_bound,
    )
    fn.validate()
    # epsilon: measured optimization spread, a proxy for LSE excess risk
    epsilon = float(np.mean(restart_risks) - best_risk) if restart_risks else 0.0
    return MaxAffineFit(
        fn=fn,
        risk=best_risk,
        epsilon=max(epsilon, 0.0),
        restart_risks=restart_risks,
        sweeps=total_sweeps,
    )


# ---------------------------------------------------------------------------
# input-convex network form


@dataclass(eq=False)
class IcnnParams:
    """K-layer scalar ICNN over the doubled input (x, -x).

    Layer i computes y_i = relu(y_{i-1} + w_pos[i] . x - w_neg[i] . x + beta[i])
    with y_{-1} = 0; all input weights are nonnegative and the passthrough
    weight on y_{i-1} is fixed to 1, which keeps the network convex in x.
    """

    w_pos: np.ndarray
    w_neg: np.ndarray
    beta: np.ndarray
    lipschitz: float

    def __post_init__(self) -> None:
        self.w_pos = np.atleast_2d(np.asarray(self.w_pos, dtype=np.float64))
        self.w_neg = np.atleast_2d(np.asarray(self.w_neg, dtype=np.float64))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        if self.w_pos.shape != self.w_neg.shape:
            raise DimensionMismatch("w_pos and w_neg must share a shape")
        if self.w_pos.shape[0] != self.beta.shape[0]:
            raise DimensionMismatch("one shift per layer required")
        if not (np.isfinite(self.lipschitz) and self.lipschitz > 0.0):
            raise InvalidBounds(f"lipschitz bound must be positive, got {self.lipschitz}")

    @property
    def layer_count(self) -> int:
        return self.w_pos.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_pos.shape[1]

    def validate(self) -> None:
        if self.w_pos.min(initial=0.0) < 0.0 or self.w_neg.min(initial=0.0) < 0.0:
            raise InvariantViolation("ICNN input weights must be nonnegative")
        net = self.w_pos - self.w_neg
        suffix = np.cumsum(net[::-1], axis=0)[::-1]
        sup = float(np.abs(suffix).max())
        if sup > self.lipschitz + 1e-12:
            raise InvariantViolation(
                f"suffix slope sup-norm {sup} exceeds Lipschitz bound {self.lipschitz}"
            )


def max_affine_to_icnn(fn: MaxAffineFn) -> IcnnParams:
    """Exact ICNN form of a max-affine function; network value is max(0, fn)."""
    k = fn.piece_count
    diffs = np.empty_like(fn.slopes)
    diffs[: k - 1] = fn.slopes[:-1] - fn.slopes[1:]
    diffs[k - 1] = fn.slopes[-1]
    beta = np.empty(k)
    beta[: k - 1] = fn.intercepts[:-1] - fn.intercepts[1:]
    beta[k - 1] = fn.intercepts[-1]
    params = IcnnParams(
        w_pos=np.maximum(diffs, 0.0),
        w_neg=np.maximum(-diffs, 0.0),
        beta=beta,
        lipschitz=fn.lipschitz,
    )
    params.validate()
    return params


def icnn_to_max_affine(
    params: IcnnParams, upper_bound: float = 1.0
) -> MaxAffineFn:
    """Recover the max-affine pieces from an ICNN via suffix sums.

    The network itself computes max(0, h(x)) for the returned h; callers that
    need the rectified value should clamp h at zero.
    """
    net = params.w_pos - params.w_neg
    slopes = np.cumsum(net[::-1], axis=0)[::-1]
    intercepts = np.cumsum(params.beta[::-1])[::-1]
    return MaxAffineFn(
        slopes=slopes,
        intercepts=intercepts,
        lipschitz=params.lipschitz,
        upper_bound=upper_bound,
    )


def eval_icnn(params: IcnnParams, x: np.ndarray) -> np.ndarray:
    """Forward pass through the layer recursion (the conversion oracle)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = _as_points(arr, params.input_dim)
    hidden = np.zeros(pts.shape[0])
    for i in range(params.layer_count):
        pre = hidden + pts @ (params.w_pos[i] - params.w_neg[i]) + params.beta[i]
        hidden = np.maximum(pre, 0.0)
    return float(hidden[0]) if single else hidden


# ---------------------------------------------------------------------------
# plain-text serialization

_HEADER = "maxaffine v1"


def to_text(fn: MaxAffineFn) -> str:
    """Serialize to the line format 'maxaffine v1 d K L B' + one piece/line."""
    lines = [
        f"{_HEADER} {fn.input_dim} {fn.piece_count} "
        f"{float(fn.lipschitz)!r} {float(fn.upper_bound)!r}"
    ]
    for slope, c in zip(fn.slopes, fn.intercepts):
        parts = [repr(float(v)) for v in slope] + [repr(float(c))]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> MaxAffineFn:
    """Parse the to_text format back into a MaxAffineFn."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("empty max-affine serialization")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "maxaffine" or head[1] != "v1":
        raise ConfigError(f"bad max-affine header: {lines[0]!r}")
    try:
        d, k = int(head[2]), int(head[3])
        lipschitz, upper = float(head[4]), float(head[5])
    except ValueError as exc:
        raise ConfigError(f"unparseable max-affine header: {lines[0]!r}") from exc
    if len(lines) - 1 != k:
        raise DimensionMismatch(f"expected {k} piece lines, found {len(lines) - 1}")
    slopes = np.zeros((k, d))
    intercepts = np.zeros(k)
    for row, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != d + 1:
            raise DimensionMismatch(
                f"piece line {row} has {len(parts)} fields, expected {d + 1}"
            )
        values = [float(p) for p in parts]
        slopes[row] = values[:-1]
        intercepts[row] = values[-1]
    return MaxAffineFn(
        slopes=slopes, intercepts=intercepts, lipschitz=lipschitz, upper_bound=upper
    )
