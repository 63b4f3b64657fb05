"""Command-line entry point: single solves, sample-size sweeps, the grid
reference solver, and a regression micro-benchmark.

The experiment subcommand reproduces the headline convergence study: for
each sample size M it runs several independent solver trials, measures the
l1 distance of the final prices to the grid reference fixed point, and fits
a log-log rate through the mean errors. Everything lands in an output
directory as CSV plus one SVG convergence plot.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfqi import CfqiConfig
from .errors import (
    ConfigError,
    DegenerateInput,
    DimensionMismatch,
    InvalidBounds,
    IterationDiverged,
    MfghamError,
    OracleNoConvergence,
)
from .household_firm import (
    AiyagariConfig,
    config_from_mapping,
    config_to_mapping,
    default_config,
)
from .mfg_loop import (
    EquilibriumResult,
    reference_equilibrium,
    solve,
    write_trajectory_csv,
)
from .shape_reg import RegressionProblem, fit_max_affine, select_piece_count

log = logging.getLogger("mfgham")

RUNS_COLUMNS = ("m", "trial", "seed", "wage", "rent", "error_l1")
AGGREGATE_COLUMNS = ("m", "trials", "mean_error", "sd_error")
RATE_COLUMNS = ("slope", "intercept", "r_squared")
REFERENCE_COLUMNS = ("wage", "rent", "grid_points")
BENCH_COLUMNS = ("m", "pieces", "risk", "seconds")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


@dataclass(frozen=True)
class ExperimentPlan:
    """Sweep layout: which sample sizes, how many trials, how many rounds."""

    m_list: tuple[int, ...] = (250, 1000, 4000)
    trials: int = 10
    rounds: int = 15
    seed: int = 0
    out_dir: Path = Path("out")
    config_path: Path | None = None

    def validate(self) -> None:
        if not self.m_list:
            raise InvalidBounds("m_list must not be empty")
        if any(m < 50 for m in self.m_list):
            raise InvalidBounds(f"every sample size must be >= 50, got {self.m_list}")
        if self.trials < 1:
            raise InvalidBounds(f"trials must be >= 1, got {self.trials}")
        if self.rounds < 0:
            raise InvalidBounds(f"rounds must be >= 0, got {self.rounds}")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass(frozen=True)
class RunRow:
    m: int
    trial: int
    seed: int
    wage: float
    rent: float
    error_l1: float


def rate_fit(points: list[tuple[float, float]]) -> RateFit:
    """Least-squares slope of log error against log sample size.

    Points are (M, error) pairs; at least two distinct M values and strictly
    positive errors are required, otherwise the log coordinates degenerate.
    """
    if len(points) < 2:
        raise DegenerateInput(f"need at least 2 points, got {len(points)}")
    m = np.array([p[0] for p in points], dtype=np.float64)
    err = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(m <= 0.0) or np.any(err <= 0.0):
        raise DegenerateInput("sample sizes and errors must be positive")
    if len(np.unique(m)) < 2:
        raise DegenerateInput("need at least 2 distinct sample sizes")
    x = np.log(m)
    y = np.log(err)
    xc = x - x.mean()
    slope = float((xc * y).sum() / (xc * xc).sum())
    intercept = float(y.mean() - slope * x.mean())
    residual = y - (intercept + slope * x)
    ss_res = float((residual * residual).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(slope=slope, intercept=intercept, r_squared=r2)


# ---------------------------------------------------------------------------
# experiment harness


def _run_seeds(plan: ExperimentPlan) -> dict[tuple[int, int], int]:
    """One integer seed per (m, trial), independent of execution order."""
    children = np.random.SeedSequence(plan.seed).spawn(
        len(plan.m_list) * plan.trials
    )
    seeds = {}
    for i, m in enumerate(plan.m_list):
        for trial in range(plan.trials):
            child = children[i * plan.trials + trial]
            seeds[(m, trial)] = int(child.generate_state(1)[0])
    return seeds


def _one_trial(payload):
    cfg, m, trial, run_seed, rounds = payload
    result = solve(cfg, rounds=rounds, sample_count=m, seed=run_seed)
    return m, trial, run_seed, result.trajectory, result.records


def run_experiment(
    cfg: AiyagariConfig, plan: ExperimentPlan, jobs: int = 1
) -> tuple[list[RunRow], RateFit]:
    """Run the sweep, write all artifacts, and return the per-run table."""
    plan.validate()
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    log.info("computing grid reference fixed point (%d nodes)", cfg.oracle_grid)
    z_star = reference_equilibrium(cfg)
    _write_csv(
        out / "reference.csv",
        REFERENCE_COLUMNS,
        [[repr(z_star.wage), repr(z_star.rent), cfg.oracle_grid]],
    )

    seeds = _run_seeds(plan)
    payloads = [
        (cfg, m, trial, seeds[(m, trial)], plan.rounds)
        for m in plan.m_list
        for trial in range(plan.trials)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_one_trial, payloads))
    else:
        outcomes = []
        for idx, payload in enumerate(payloads, start=1):
            outcomes.append(_one_trial(payload))
            log.info("trial %d/%d done (m=%d)", idx, len(payloads), payload[1])

    rows: list[RunRow] = []
    for m, trial, run_seed, trajectory, records in outcomes:
        final = trajectory[-1]
        error = final.l1_distance(z_star)
        rows.append(RunRow(m, trial, run_seed, final.wage, final.rent, error))
        shell = EquilibriumResult(
            trajectory=trajectory, records=records, policy=None, seed=run_seed
        )
        write_trajectory_csv(out / f"trajectory_m{m}_t{trial}.csv", shell)
        log.info("m=%d trial=%d error=%.5f", m, trial, error)

    _write_csv(
        out / "runs.csv",
        RUNS_COLUMNS,
        [
            [r.m, r.trial, r.seed, repr(r.wage), repr(r.rent), repr(r.error_l1)]
            for r in rows
        ],
    )

    means = []
    aggregate_rows = []
    for m in plan.m_list:
        errs = np.array([r.error_l1 for r in rows if r.m == m])
        sd = float(errs.std(ddof=1)) if len(errs) > 1 else 0.0
        means.append((m, float(errs.mean()), sd))
        aggregate_rows.append(
            [m, len(errs), repr(float(errs.mean())), repr(sd)]
        )
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate_rows)

    fit = None
    if len(set(plan.m_list)) >= 2:
        fit = rate_fit([(m, mean) for m, mean, _ in means])
        _write_csv(
            out / "rate.csv",
            RATE_COLUMNS,
            [[repr(fit.slope), repr(fit.intercept), repr(fit.r_squared)]],
        )
    _write_convergence_svg(out / "convergence.svg", means, fit)
    log.info(
        "experiment finished in %.1fs%s",
        time.perf_counter() - started,
        "" if fit is None else f", rate slope {fit.slope:.3f}",
    )
    return rows, fit


def _write_convergence_svg(
    path: Path, means: list[tuple[int, float, float]], fit: RateFit | None
) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "mfgham"
    import matplotlib.pyplot as plt

    m = np.array([row[0] for row in means], dtype=np.float64)
    mean = np.array([row[1] for row in means])
    sd = np.array([row[2] for row in means])
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.errorbar(m, mean, yerr=sd, fmt="o-", capsize=4, label="mean error +/- 1 sd")
    if fit is not None:
        span = np.array([m.min(), m.max()])
        ax.plot(
            span,
            np.exp(fit.intercept) * span**fit.slope,
            "--",
            label=f"fit slope {fit.slope:.3f}",
        )
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sample size M")
    ax.set_ylabel("l1 error to reference prices")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        writer.writerows(rows)


def _read_csv(path: Path, columns) -> list[list[str]]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = tuple(next(reader))
        if header != tuple(columns):
            raise DimensionMismatch(f"unexpected header {header!r} in {path}")
        return [row for row in reader]


def read_runs_csv(path: Path) -> list[RunRow]:
    return [
        RunRow(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]))
        for r in _read_csv(path, RUNS_COLUMNS)
    ]


def read_aggregate_csv(path: Path) -> list[tuple[int, int, float, float]]:
    return [
        (int(r[0]), int(r[1]), float(r[2]), float(r[3]))
        for r in _read_csv(path, AGGREGATE_COLUMNS)
    ]


def read_rate_csv(path: Path) -> RateFit:
    row = _read_csv(path, RATE_COLUMNS)[0]
    return RateFit(float(row[0]), float(row[1]), float(row[2]))


# ---------------------------------------------------------------------------
# fit-bench


def run_fit_bench(sizes, seed: int, out: Path | None) -> list[tuple[int, int, float, float]]:
    """Time max-affine fits on synthetic convex data of increasing size."""
    rows = []
    rng = np.random.default_rng(seed)
    true_w = np.array([[1.0, -0.5], [-0.8, 0.3], [0.1, 1.2], [-0.2, -1.0]])
    true_b = np.array([0.0, 0.4, -0.3, 0.2])
    for m in sizes:
        x = rng.uniform(-2.0, 2.0, size=(m, 2))
        y = (x @ true_w.T + true_b).max(axis=1) + 0.05 * rng.standard_normal(m)
        pieces = select_piece_count(m, 2)
        problem = RegressionProblem(x, y, pieces, lipschitz=5.0, upper_bound=10.0)
        started = time.perf_counter()
        fitted = fit_max_affine(problem, rng=rng)
        elapsed = time.perf_counter() - started
        rows.append((m, pieces, fitted.risk, elapsed))
        log.info("fit-bench m=%d risk=%.5f %.2fs", m, fitted.risk, elapsed)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(
            out / "fit_bench.csv",
            BENCH_COLUMNS,
            [[m, k, repr(r), repr(s)] for m, k, r, s in rows],
        )
    return rows


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _load_config(path: str | None) -> AiyagariConfig:
    if path is None:
        return default_config()
    text = Path(path).read_text()
    mapping = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping)


def _parse_m_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --m-list {text!r}: {exc}") from None
    if not values:
        raise ConfigError(f"bad --m-list {text!r}: no values")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgham",
        description="Equilibrium solver and experiment harness for the "
        "heterogeneous-agent savings model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--print-config",
            action="store_true",
            help="print the effective configuration and exit",
        )

    p_solve = sub.add_parser("solve", help="run one solver trajectory")
    common(p_solve)
    p_solve.add_argument("--rounds", type=int, default=15)
    p_solve.add_argument("--samples", type=int, default=4000)

    p_exp = sub.add_parser("experiment", help="sample-size sweep with rate fit")
    common(p_exp)
    p_exp.add_argument("--rounds", type=int, default=15)
    p_exp.add_argument("--m-list", default="250,1000,4000")
    p_exp.add_argument("--trials", type=int, default=10)
    p_exp.add_argument("--jobs", type=int, default=1)

    p_oracle = sub.add_parser("oracle", help="print the grid reference prices")
    common(p_oracle)
    p_oracle.add_argument("--grid", type=int, default=None)

    p_bench = sub.add_parser("fit-bench", help="time the convex regression")
    common(p_bench)
    p_bench.add_argument("--m-list", default="250,1000,4000")

    return parser


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("MFGHAM_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.print_config:
            for key, value in config_to_mapping(cfg).items():
                print(f"{key} = {value}")
            return EXIT_OK
        if args.command == "solve":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            result = solve(
                cfg, rounds=args.rounds, sample_count=args.samples, seed=args.seed
            )
            write_trajectory_csv(out / "trajectory.csv", result)
            final = result.final
            print(f"wage = {final.wage:.8f}")
            print(f"rent = {final.rent:.8f}")
        elif args.command == "experiment":
            plan = ExperimentPlan(
                m_list=_parse_m_list(args.m_list),
                trials=args.trials,
                rounds=args.rounds,
                seed=args.seed,
                out_dir=Path(args.out),
                config_path=Path(args.config) if args.config else None,
            )
            _, fit = run_experiment(cfg, plan, jobs=max(1, args.jobs))
            if fit is not None:
                print(f"rate slope = {fit.slope:.4f} (r^2 = {fit.r_squared:.3f})")
            else:
                print("single sample size, no rate fit")
        elif args.command == "oracle":
            z = reference_equilibrium(cfg, grid_points=args.grid)
            print(f"wage = {z.wage:.10f}")
            print(f"rent = {z.rent:.10f}")
        elif args.command == "fit-bench":
            rows = run_fit_bench(
                _parse_m_list(args.m_list), args.seed, Path(args.out)
            )
            for m, pieces, risk, seconds in rows:
                print(f"m={m} pieces={pieces} risk={risk:.6f} time={seconds:.2f}s")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InvalidBounds, DegenerateInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IterationDiverged, OracleNoConvergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MfghamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
