"""Seeded multi-run campaigns, score normalization and CSV / SVG reports.

A campaign trains every strategy on the same list of run seeds. Run ``i``
uses ``run_seed(master_seed, i)`` for every strategy so paired comparisons
see identical environment and exploration streams up to the point where
the replay sampling makes the runs diverge.

Outputs in the campaign directory:

* ``report.csv``: one row per run followed by one aggregate row per strategy
* ``curves.csv``: median normalized cumulative score per strategy and checkpoint
* ``curves.svg``: the same curves as a line chart
* ``runs/<strategy>_<index>.csv``: the evaluation log of every run
* ``meta.json``: PRNG, seeds, random-policy score and the resolved config
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import Environment, make_env
from .learner import TrainConfig, TrainingAborted, train
from .priority import Strategy
from .svg import line_chart

logger = logging.getLogger(__name__)

PRNG_NAME = "PCG64 via numpy SeedSequence; per-run streams spawned for env, explore, sample, eval"
REPORT_COLUMNS = ["row_type", "env_id", "strategy", "run_index", "seed", "status",
                  "steps_to_threshold", "censored", "peak_score", "final_score",
                  "final_q_error", "grad_steps", "uniform_fallbacks", "n_runs", "failures",
                  "censored_runs", "outliers", "error"]


@dataclass
class CampaignConfig:
    env_id: str
    strategies: list = field(default_factory=lambda: ["uniform", "per", "reaper"])
    seed_count: int = 5
    master_seed: int = 0
    train: dict = field(default_factory=dict)
    out_dir: str = "campaign"
    jobs: int = 1
    random_episodes: int = 100

    def __post_init__(self):
        if self.seed_count < 1:
            raise ValueError("seed_count must be >= 1")
        self.strategies = [Strategy.parse(s).value for s in self.strategies]
        make_env(self.env_id)
        self.train_config()

    _KEYS = ("env_id", "strategies", "seed_count", "master_seed", "out_dir", "jobs", "random_episodes")

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        """Flat mapping: campaign keys as above, every other key is a training override."""
        data = dict(data)
        aliases = {"env": "env_id", "seeds": "seed_count", "out": "out_dir"}
        for short, long in aliases.items():
            if short in data:
                data[long] = data.pop(short)
        own = {k: data.pop(k) for k in cls._KEYS if k in data}
        train_over = dict(data.pop("train", {}))
        train_over.update(data)
        return cls(train=train_over, **own)

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_seed(master_seed: int, run_index: int) -> int:
    """Stable 64-bit seed of ``(master_seed, run_index)``; shared by all strategies."""
    digest = hashlib.blake2b(f"{master_seed}:{run_index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RunResult:
    strategy: str
    run_index: int
    seed: int
    status: str
    steps_to_threshold: int | None = None
    censored: bool | None = None
    scores: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    final_q_error: float | None = None
    grad_steps: int = 0
    uniform_fallbacks: int = 0
    error: str = ""
    log_rows: list = field(default_factory=list)

    @property
    def peak_score(self):
        return max(self.scores) if self.scores else None

    @property
    def final_score(self):
        return self.scores[-1] if self.scores else None


def _execute(args) -> RunResult:
    env_id, strategy, config, run_index, seed = args
    env = make_env(env_id)
    try:
        log = train(env, strategy, config, seed=seed)
    except (TrainingAborted, FloatingPointError) as exc:
        return RunResult(strategy, run_index, seed, "aborted", error=f"{type(exc).__name__}: {exc}")
    has_threshold = env.spec.reward_threshold is not None
    return RunResult(
        strategy, run_index, seed, "ok",
        steps_to_threshold=log.steps_to_threshold if has_threshold else None,
        censored=log.censored if has_threshold else None, scores=log.scores, steps=[r["step"] for r in log.rows],
        final_q_error=log.final_q_error, grad_steps=log.grad_steps,
        uniform_fallbacks=log.uniform_fallbacks, log_rows=log.rows)


def tukey_outliers(values, k: float = 1.5) -> np.ndarray:
    """Boolean mask of values outside ``[q1 - k IQR, q3 + k IQR]``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    q1, q3 = np.percentile(v, [25, 75])
    iqr = q3 - q1
    return (v < q1 - k * iqr) | (v > q3 + k * iqr)


def box_summary(values, k: float = 1.5) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    mask = tukey_outliers(v, k)
    inliers = v[~mask]
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_low": float(inliers.min()), "whisker_high": float(inliers.max()),
            "outliers": v[mask].tolist()}


@dataclass
class NormalizedScore:
    raw: float
    random: float
    high: float
    value: float


def normalize_scores(raw_curves, random_score: float, high: float | None = None):
    """``(raw - random) / (high - random)`` pointwise; ``high`` defaults to the overall maximum.

    Returns ``(curves, degenerate)``. When ``high == random`` every value
    is 0 and ``degenerate`` is True.
    """
    arrays = {k: np.asarray(v, dtype=float) for k, v in dict(raw_curves).items()}
    if high is None:
        high = max((float(np.max(a)) for a in arrays.values() if a.size), default=random_score)
    span = high - random_score
    if span <= 0:
        return {k: np.zeros_like(a) for k, a in arrays.items()}, True
    return {k: (a - random_score) / span for k, a in arrays.items()}, False


def estimate_random_score(env: Environment, episodes: int, seed: int) -> float:
    """Mean return of the uniformly random policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        env.reset(rng)
        total = 0.0
        while True:
            out = env.step(int(rng.integers(env.spec.action_count)), rng)
            total += out.reward
            if out.terminated:
                break
        returns.append(total)
    return float(np.mean(returns))


def cumulative_normalized(scores, random_score: float, high: float) -> np.ndarray:
    """Normalized cumulative score: the running sum of raw scores, normalized against
    the same number of random-policy and best scores (equivalently, the running mean
    of normalized scores)."""
    s = np.asarray(scores, dtype=float)
    span = high - random_score
    if s.size == 0 or span <= 0:
        return np.zeros_like(s)
    counts = np.arange(1, s.size + 1)
    return (np.cumsum(s) - counts * random_score) / (counts * span)


def aggregate(rows: list[dict], strategy: str) -> dict:
    """Aggregate row for one strategy, computed from its per-run report rows."""
    mine = [r for r in rows if r["strategy"] == strategy and r["row_type"] == "run"]
    ok = [r for r in mine if r["status"] == "ok"]

    def mean(key):
        vals = [float(r[key]) for r in ok if r[key] not in (None, "")]
        return float(np.mean(vals)) if vals else None

    steps = [float(r["steps_to_threshold"]) for r in ok if r["steps_to_threshold"] not in (None, "")]
    return {
        "row_type": "aggregate", "env_id": mine[0]["env_id"] if mine else "", "strategy": strategy,
        "run_index": "", "seed": "", "status": "ok" if len(ok) == len(mine) else "partial",
        "steps_to_threshold": mean("steps_to_threshold"),
        "censored": "", "peak_score": mean("peak_score"), "final_score": mean("final_score"),
        "final_q_error": mean("final_q_error"), "grad_steps": mean("grad_steps"),
        "uniform_fallbacks": sum(int(r["uniform_fallbacks"] or 0) for r in ok),
        "n_runs": len(mine), "failures": len(mine) - len(ok),
        "censored_runs": sum(str(r["censored"]) in ("True", "1") for r in ok),
        "outliers": int(tukey_outliers(steps).sum()) if steps else 0, "error": "",
    }


def _run_row(env_id: str, r: RunResult) -> dict:
    return {
        "row_type": "run", "env_id": env_id, "strategy": r.strategy, "run_index": r.run_index,
        "seed": r.seed, "status": r.status, "steps_to_threshold": r.steps_to_threshold,
        "censored": r.censored, "peak_score": r.peak_score, "final_score": r.final_score,
        "final_q_error": r.final_q_error, "grad_steps": r.grad_steps,
        "uniform_fallbacks": r.uniform_fallbacks, "n_runs": "", "failures": "",
        "censored_runs": "", "outliers": "", "error": r.error,
    }


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class CampaignReport:
    config: CampaignConfig
    results: list
    rows: list
    random_score: float
    high_score: float
    degenerate: bool
    curves: dict

    @property
    def aborted(self) -> int:
        return sum(r.status != "ok" for r in self.results)

    def mean_steps(self, strategy: str) -> float | None:
        row = next(r for r in self.rows if r["row_type"] == "aggregate" and r["strategy"] == strategy)
        return row["steps_to_threshold"]


def run_campaign(config: CampaignConfig, write: bool = True) -> CampaignReport:
    train_config = config.train_config()
    seeds = [run_seed(config.master_seed, i) for i in range(config.seed_count)]
    jobs = [(config.env_id, s, train_config, i, seeds[i])
            for s in config.strategies for i in range(config.seed_count)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_execute, jobs))
    else:
        results = [_execute(j) for j in jobs]
    for r in results:
        if r.status != "ok":
            logger.warning("run %s/%d aborted: %s", r.strategy, r.run_index, r.error)

    rows = [_run_row(config.env_id, r) for r in results]
    rows += [aggregate(rows, s) for s in config.strategies]

    random_score = estimate_random_score(make_env(config.env_id), config.random_episodes,
                                         run_seed(config.master_seed, -1))
    ok = [r for r in results if r.status == "ok" and r.scores]
    high = max((max(r.scores) for r in ok), default=random_score)
    degenerate = high <= random_score
    curves = {}
    for s in config.strategies:
        runs = [r for r in ok if r.strategy == s]
        if not runs:
            continue
        width = min(len(r.scores) for r in runs)
        stacked = np.array([cumulative_normalized(r.scores[:width], random_score, high) for r in runs])
        curves[s] = {"step": runs[0].steps[:width], "median": np.median(stacked, axis=0).tolist()}

    report = CampaignReport(config, results, rows, random_score, high, degenerate, curves)
    if write:
        write_campaign(report)
    return report


def write_campaign(report: CampaignReport) -> None:
    config = report.config
    out = config.out_dir
    os.makedirs(os.path.join(out, "runs"), exist_ok=True)
    write_rows(os.path.join(out, "report.csv"), report.rows, REPORT_COLUMNS)
    curve_rows = [{"strategy": s, "checkpoint": i, "step": step, "median_normalized_cumulative": v}
                  for s, c in report.curves.items() for i, (step, v) in enumerate(zip(c["step"], c["median"]))]
    write_rows(os.path.join(out, "curves.csv"), curve_rows,
               ["strategy", "checkpoint", "step", "median_normalized_cumulative"])
    from .learner import RUNLOG_COLUMNS
    for r in report.results:
        write_rows(os.path.join(out, "runs", f"{r.strategy}_{r.run_index}.csv"), r.log_rows, RUNLOG_COLUMNS)
    with open(os.path.join(out, "curves.svg"), "w") as fh:
        fh.write(line_chart({s: (c["step"], c["median"]) for s, c in report.curves.items()},
                            title=f"{config.env_id}: median normalized cumulative score",
                            xlabel="environment step", ylabel="normalized cumulative score"))
    meta = {
        "prng": PRNG_NAME,
        "seeds": {str(i): run_seed(config.master_seed, i) for i in range(config.seed_count)},
        "random_score": report.random_score,
        "high_score": report.high_score,
        "degenerate_normalization": report.degenerate,
        "config": config.to_dict(),
        "train_config": report.config.train_config().to_dict(),
    }
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def verify_report(path) -> list[str]:
    """Recompute every aggregate row of ``report.csv`` from its run rows.

    Returns human-readable mismatches; an empty list means the file is
    consistent.
    """
    rows = read_rows(path)
    problems = []
    runs = [r for r in rows if r["row_type"] == "run"]
    for stored in (r for r in rows if r["row_type"] == "aggregate"):
        fresh = aggregate(runs, stored["strategy"])
        for key in REPORT_COLUMNS:
            a, b = stored[key], _cell(fresh[key])
            if a == b:
                continue
            try:
                if math.isclose(float(a), float(b), rel_tol=1e-12, abs_tol=1e-12):
                    continue
            except ValueError:
                pass
            problems.append(f"{stored['strategy']}.{key}: stored {a!r} recomputed {b!r}")
    return problems


def improvement(report: CampaignReport, baseline: str = "per", candidate: str = "reaper") -> float | None:
    """Percentage drop in mean steps-to-threshold of ``candidate`` relative to ``baseline``."""
    b, c = report.mean_steps(baseline), report.mean_steps(candidate)
    if b in (None, 0) or c is None:
        return None
    return 100.0 * (b - c) / b
