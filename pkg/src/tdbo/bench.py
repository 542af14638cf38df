"""Benchmark loop, replication runner, regret metric and summaries.

A run observes ``n_initial`` points at equally spaced times in
``[t0, t_train_end]`` and then one point at each of ``m_steps`` equally
spaced times ending at the horizon.  The point chosen at the horizon is the
decision; its noise-free payoff gives the normalized simple regret.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .acquisition import EIMUMAX, PIMUMAX, RANDOM, REI, UCB, AcquisitionParams, propose_myopic
from .gp import Dataset, GPNumericalError, build_model, default_log_bounds, fit_hyperparameters
from .lookahead import LookaheadConfig, final_decision, propose_r2ley
from .optimizer import OptimizationError, multistart_seeds
from .testbed import OracleSpec, eval_oracle, extrema_at_horizon, observe, synthetic_oracle

log = logging.getLogger(__name__)

R2LEY = "r2ley"
METHODS = {"ei": EIMUMAX, "pi": PIMUMAX, "ucb": UCB, "random": RANDOM, "rei": REI, R2LEY: R2LEY}
REGRET_FLOOR = 1e-12
SUMMARY_HEADER = ["case", "d", "method", "mean", "stderr", "median", "q25", "q75", "reps"]

_PROPOSAL_ERRORS = (OptimizationError, GPNumericalError, np.linalg.LinAlgError, ArithmeticError)


def default_n_initial(d: int) -> int:
    return (d + 1) * (20 if d <= 6 else 10)


@dataclass(frozen=True)
class RunConfig:
    oracle: OracleSpec
    acquisition: AcquisitionParams | LookaheadConfig
    method: str
    n_initial: int
    m_steps: int = 10
    t_train_end: float = 2.0
    horizon_T: float = 4.0
    replications: int = 1
    seed: int = 0
    fit_starts: int = 4
    fit_bounds: tuple | None = None
    initial_design: str = "uniform"
    output: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.n_initial < 2:
            raise ValueError("need at least two initial observations")
        if self.m_steps < 1:
            raise ValueError("need at least one optimization step")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        t0, t1 = self.oracle.time_range
        if not t0 <= self.t_train_end < self.horizon_T <= t1:
            raise ValueError(
                f"need {t0} <= t_train_end ({self.t_train_end}) < horizon ({self.horizon_T}) <= {t1}"
            )
        if isinstance(self.acquisition, LookaheadConfig) and self.acquisition.horizon_T != self.horizon_T:
            raise ValueError("lookahead horizon differs from the run horizon")
        if self.initial_design not in ("uniform", "lhs"):
            raise ValueError(f"unknown initial design {self.initial_design!r}")

    @property
    def initial_times(self) -> np.ndarray:
        return np.linspace(self.oracle.time_range[0], self.t_train_end, self.n_initial)

    @property
    def step_times(self) -> np.ndarray:
        k = np.arange(1, self.m_steps + 1)
        times = self.t_train_end + (self.horizon_T - self.t_train_end) * k / self.m_steps
        times[-1] = self.horizon_T
        return times


def make_config(
    case: str | OracleSpec,
    method: str,
    *,
    reps: int = 20,
    seed: int = 0,
    mc_samples: int = 500,
    steps: int = 10,
    horizon: float = 4.0,
    noise: float | None = None,
    n_initial: int | None = None,
    t_train_end: float = 2.0,
    fit_starts: int = 4,
    initial_design: str = "uniform",
    lookahead: dict | None = None,
    acquisition: dict | None = None,
) -> RunConfig:
    """Run configuration with the suite defaults filled in."""
    oracle = case if isinstance(case, OracleSpec) else synthetic_oracle(case, noise)
    if isinstance(case, OracleSpec) and noise is not None:
        oracle = oracle.with_noise(noise)
    method = method.lower()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    if method == R2LEY:
        acq = LookaheadConfig(horizon_T=horizon, mc_samples_M=mc_samples, **(lookahead or {}))
    else:
        acq = AcquisitionParams(METHODS[method], **(acquisition or {}))
    return RunConfig(
        oracle, acq, method,
        n_initial if n_initial is not None else default_n_initial(oracle.dim_d),
        steps, t_train_end, horizon, reps, seed, fit_starts, None, initial_design,
    )


@dataclass
class RunRecord:
    case: str
    method: str
    d: int
    replication: int
    seed: int
    initial_x: list
    initial_t: list
    initial_y: list
    step_t: list
    step_x: list
    step_y: list
    x_final: list | None
    f_final: float | None
    f_max: float
    f_min: float
    regret: float | None
    warnings: list = field(default_factory=list)
    error: str | None = None
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None and self.regret is not None and math.isfinite(self.regret)

    def to_json(self) -> str:
        data = asdict(self)
        del data["wall_clock"]
        return json.dumps(data, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def simple_regret(f_max: float, f_min: float, f_val: float) -> float:
    """``log10`` of the normalized gap to the maximum, floored at 1e-12."""
    if not f_max > f_min:
        raise ValueError(f"need f_max > f_min, got {f_max} and {f_min}")
    gap = (f_max - f_val) / (f_max - f_min)
    return math.log10(max(gap, REGRET_FLOOR))


def _fit(data: Dataset, config: RunConfig, rng, init=None):
    span = config.horizon_T - config.oracle.time_range[0]
    bounds = config.fit_bounds
    if bounds is None:
        bounds = default_log_bounds(data, config.oracle.domain.width, span)
    return fit_hyperparameters(data, bounds=bounds, n_starts=config.fit_starts, rng=rng, init=init)


def _propose(config: RunConfig, model, t: float, final: bool, rng) -> np.ndarray:
    acq, domain = config.acquisition, config.oracle.domain
    if isinstance(acq, LookaheadConfig):
        if final:
            return final_decision(model, config.horizon_T, domain, acq)
        return propose_r2ley(model, t, acq, domain, rng)
    return propose_myopic(acq, model, t, domain, rng, final_step=final)


def run_bo(config: RunConfig, rng=None, replication: int = 0) -> RunRecord:
    """One Bayesian optimization run, deterministic in the integer seed ``rng``.

    The seed splits into independent streams for the initial design, the
    observation noise and the policy, so runs sharing a seed share their
    initial data and noise draws whatever the method.
    """
    start = time.perf_counter()
    seed = config.seed if rng is None else rng
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    seed = int(seed)
    design_rng, obs_rng, policy_rng = (np.random.default_rng([seed, k]) for k in range(3))
    oracle, domain = config.oracle, config.oracle.domain
    warnings: list[str] = []

    t_init = config.initial_times
    if config.initial_design == "lhs":
        X0 = multistart_seeds(domain, config.n_initial, design_rng)
    else:
        X0 = domain.sample_uniform(design_rng, config.n_initial)
    y0 = np.array([observe(oracle, x, t, obs_rng) for x, t in zip(X0, t_init)])
    data = Dataset(X0, t_init, y0)

    fit = _fit(data, config, policy_rng)
    if fit.warning:
        warnings.append(f"initial fit: {fit.warning}")
    model = build_model(data, fit.hyperparams)

    step_x, step_y = [], []
    times = config.step_times
    for k, t in enumerate(times):
        final = k == len(times) - 1
        try:
            x = _propose(config, model, float(t), final, policy_rng)
        except _PROPOSAL_ERRORS as exc:
            warnings.append(f"step {k + 1}: proposal failed ({exc}); random fallback")
            x = domain.sample_uniform(policy_rng, 1)[0]
        x = domain.clip(np.asarray(x, dtype=float))
        y = observe(oracle, x, float(t), obs_rng)
        step_x.append(x)
        step_y.append(y)
        if final:
            break
        data = data.append(x, t, y)
        fit = _fit(data, config, policy_rng, init=fit.hyperparams)
        if fit.warning:
            warnings.append(f"step {k + 1} fit: {fit.warning}")
        model = build_model(data, fit.hyperparams)

    x_final = step_x[-1]
    f_final = eval_oracle(oracle, x_final, config.horizon_T)
    f_max, f_min = extrema_at_horizon(oracle, config.horizon_T)
    return RunRecord(
        oracle.name, config.method, oracle.dim_d, replication, seed,
        X0.tolist(), t_init.tolist(), y0.tolist(),
        times.tolist(), [x.tolist() for x in step_x], [float(y) for y in step_y],
        x_final.tolist(), f_final, f_max, f_min,
        simple_regret(f_max, f_min, f_final), warnings,
        wall_clock=time.perf_counter() - start,
    )


def replication_seed(config: RunConfig, rep: int) -> int:
    """Seed of replication ``rep``; it ignores the method so that all
    methods on a case see the same initial designs."""
    key = zlib.crc32(config.oracle.name.encode("utf-8"))
    ss = np.random.SeedSequence([int(config.seed), key, int(rep)])
    return int(ss.generate_state(1, np.uint64)[0])


def _run_one(config: RunConfig, rep: int) -> RunRecord:
    seed = replication_seed(config, rep)
    try:
        return run_bo(config, seed, replication=rep)
    except Exception as exc:  # one failed replication must not sink the batch
        log.warning("%s/%s replication %d failed: %s", config.oracle.name, config.method, rep, exc)
        return RunRecord(
            config.oracle.name, config.method, config.oracle.dim_d, rep, seed,
            [], [], [], [], [], [], None, None, float("nan"), float("nan"), None,
            [], f"{type(exc).__name__}: {exc}",
        )


def _init_worker():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def run_many(jobs: list[tuple[RunConfig, int]], workers: int = 1) -> list[RunRecord]:
    """Execute ``(config, replication)`` jobs; results keep the job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(c, r) for c, r in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker) as pool:
        futures = [pool.submit(_run_one, c, r) for c, r in jobs]
        return [f.result() for f in futures]


def replicate(config: RunConfig, workers: int = 1) -> list[RunRecord]:
    records = run_many([(config, r) for r in range(config.replications)], workers)
    if not any(rec.ok for rec in records):
        raise RuntimeError(f"all {len(records)} replications failed; first error: {records[0].error}")
    return records


def suite_configs(cases: Iterable[str], methods: Iterable[str], **kwargs) -> list[RunConfig]:
    return [make_config(c, m, **kwargs) for c in cases for m in methods]


def run_suite(configs: list[RunConfig], workers: int = 1) -> list[RunRecord]:
    jobs = [(c, r) for c in configs for r in range(c.replications)]
    records = run_many(jobs, workers)
    if not any(rec.ok for rec in records):
        raise RuntimeError("every run in the suite failed")
    return records


class SummaryRow(NamedTuple):
    case: str
    d: int
    method: str
    mean: float
    stderr: float
    median: float
    q25: float
    q75: float
    reps: int


def summarize(records: Iterable[RunRecord], grouping=("case", "method")) -> list[SummaryRow]:
    """Regret statistics per group, in order of first appearance.

    Failed replications are left out and do not count towards ``reps``.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        groups.setdefault(tuple(getattr(rec, g) for g in grouping), []).append(rec)
    rows = []
    for recs in groups.values():
        r = np.array([rec.regret for rec in recs if rec.ok], dtype=float)
        if r.size == 0:
            continue
        stderr = float(np.std(r, ddof=1) / np.sqrt(r.size)) if r.size > 1 else 0.0
        q25, med, q75 = (float(v) for v in np.percentile(r, [25, 50, 75]))
        first = recs[0]
        rows.append(SummaryRow(first.case, first.d, first.method, float(np.mean(r)), stderr, med, q25, q75, int(r.size)))
    return rows


def write_records(records: Iterable[RunRecord], fh) -> None:
    for rec in records:
        fh.write(rec.to_json())
        fh.write("\n")


def read_records(fh) -> list[RunRecord]:
    return [RunRecord.from_json(line) for line in fh if line.strip()]


def summary_csv(rows: Iterable[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()
