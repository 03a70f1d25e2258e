"""Greedy transition selection on a single optimal-path episode.

The episode has ``n`` transitions whose targets chain forward:
``target[t] = q[t + 1]`` and the last target is the final reward 1. Every
selection sets the chosen entry to its current target (gamma = 1, one
transition per step, learning rate 1) and the run ends once every TD
error is zero, i.e. once ``q`` is all ones.

Reliability conditions differ only in the initial table: ``q`` starts at
zero and LOW / MEDIUM overwrite every 2nd / 4th entry with a one, counting
positions from 1 (so LOW sets positions 2, 4, ...).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .priority import episode_reliabilities

SAFETY_CAP = 1_000_000
OVERWRITE_CONVENTION = "ones at 1-based positions stride, 2*stride, ... (LOW stride 2, MEDIUM stride 4)"
STYLIZED_COLUMNS = ["selector", "condition", "n", "seed", "updates", "oracle_updates", "excess"]


class Condition(str, Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"

    @property
    def stride(self) -> int | None:
        return {"high": None, "medium": 4, "low": 2}[self.value]


class Selector(str, Enum):
    ORACLE = "oracle"
    PER_GREEDY = "per_greedy"
    REAPER_GREEDY = "reaper_greedy"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class StylizedConfig:
    n: int
    condition: Condition
    selector: Selector
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("episode length must be >= 1")
        object.__setattr__(self, "condition", Condition(self.condition))
        object.__setattr__(self, "selector", Selector(self.selector))


@dataclass(frozen=True)
class StylizedResult:
    config: StylizedConfig
    updates: int
    oracle_updates: int
    converged: bool

    @property
    def excess(self) -> int:
        return self.updates - self.oracle_updates

    def row(self) -> dict:
        c = self.config
        return {"selector": c.selector.value, "condition": c.condition.value, "n": c.n,
                "seed": c.seed, "updates": self.updates,
                "oracle_updates": self.oracle_updates, "excess": self.excess}


class Converged(Exception):
    """Raised by a selector when every TD error is already zero."""


def init_q(n: int, condition) -> np.ndarray:
    condition = Condition(condition)
    q = np.zeros(n)
    if condition.stride is not None:
        q[condition.stride - 1::condition.stride] = 1.0
    return q


def targets(q: np.ndarray) -> np.ndarray:
    out = np.empty_like(q)
    out[:-1] = q[1:]
    out[-1] = 1.0
    return out


def deltas(q: np.ndarray) -> np.ndarray:
    return targets(q) - q


def oracle_select(deltas) -> int:
    """Largest index (0-based) with a nonzero TD error."""
    nz = np.flatnonzero(np.asarray(deltas) != 0)
    if nz.size == 0:
        raise Converged
    return int(nz[-1])


def _argmax_random(scores: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(scores == scores.max())
    return int(best[0]) if best.size == 1 else int(best[rng.integers(best.size)])


def per_greedy_select(deltas, rng: np.random.Generator) -> int:
    abs_d = np.abs(deltas)
    if not abs_d.any():
        raise Converged
    return _argmax_random(abs_d, rng)


def reaper_greedy_select(deltas, rng: np.random.Generator) -> int:
    """Argmax of reliability times absolute TD error, the episode being terminated."""
    abs_d = np.abs(deltas)
    if not abs_d.any():
        raise Converged
    rel = episode_reliabilities(abs_d, terminated=True)
    return _argmax_random(rel * abs_d, rng)


def oracle_count(n: int, condition) -> int:
    """Minimal number of updates: every entry that is not yet 1 needs exactly one."""
    return int(np.count_nonzero(init_q(n, condition) != 1.0))


def _rng(config: StylizedConfig) -> np.random.Generator:
    codes = (list(Condition).index(config.condition), list(Selector).index(config.selector))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, config.n, *codes])))


def run_until_convergence(config: StylizedConfig, cap: int = SAFETY_CAP) -> StylizedResult:
    q = init_q(config.n, config.condition)
    rng = _rng(config)
    if config.selector is Selector.UNIFORM:
        updates, converged = _run_uniform(q, rng, cap)
    else:
        select = {
            Selector.ORACLE: lambda d: oracle_select(d),
            Selector.PER_GREEDY: lambda d: per_greedy_select(d, rng),
            Selector.REAPER_GREEDY: lambda d: reaper_greedy_select(d, rng),
        }[config.selector]
        updates, converged = 0, False
        while updates < cap:
            d = deltas(q)
            try:
                j = select(d)
            except Converged:
                converged = True
                break
            q[j] += d[j]
            updates += 1
        else:
            converged = not deltas(q).any()
    return StylizedResult(config, updates, oracle_count(config.n, config.condition), converged)


def _run_uniform(q: np.ndarray, rng: np.random.Generator, cap: int) -> tuple[int, bool]:
    """Uniform selection over all ``n`` positions, every pick counted as an update.

    Picks that land on a zero TD error leave ``q`` unchanged, so the run
    jumps over them: the number of picks until a nonzero entry is hit is
    geometric with success rate ``m / n`` and the hit is uniform over the
    ``m`` nonzero entries. This has the same distribution as drawing every
    pick one by one.
    """
    n = q.size
    nonzero = set(np.flatnonzero(deltas(q) != 0).tolist())
    updates = 0
    while nonzero:
        updates += int(rng.geometric(len(nonzero) / n))
        if updates >= cap:
            return cap, False
        pool = sorted(nonzero)
        j = pool[int(rng.integers(len(pool)))]
        q[j] = q[j + 1] if j + 1 < n else 1.0
        for t in (j - 1, j):
            if t < 0:
                continue
            target = q[t + 1] if t + 1 < n else 1.0
            if target != q[t]:
                nonzero.add(t)
            else:
                nonzero.discard(t)
    return updates, True


def parse_lengths(spec: str) -> list[int]:
    """``"10:100:10"`` -> [10, 20, ..., 100]; also accepts comma lists."""
    if ":" in spec:
        start, stop, step = (int(v) for v in spec.split(":"))
        return list(range(start, stop + 1, step))
    return [int(v) for v in spec.split(",") if v]


def run_grid(lengths, seeds: int, selectors=tuple(Selector), conditions=tuple(Condition),
             jobs: int = 1) -> list[StylizedResult]:
    configs = [StylizedConfig(n, c, s, seed)
               for s in selectors for c in conditions for n in lengths for seed in range(seeds)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(run_until_convergence, configs, chunksize=64))
    return [run_until_convergence(c) for c in configs]


def write_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STYLIZED_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())
    with open(f"{path}.meta.json", "w") as fh:
        json.dump({"overwrite_convention": OVERWRITE_CONVENTION,
                   "uniform_counts_every_pick": True,
                   "reaper_exponents": {"alpha": 1.0, "omega": 1.0},
                   "safety_cap": SAFETY_CAP}, fh, indent=2)


def summarize(results) -> dict:
    """Mean update count per (selector, condition) and per (selector, condition, n)."""
    cells: dict = {}
    for r in results:
        c = r.config
        cells.setdefault((c.selector, c.condition), []).append(r.updates)
        cells.setdefault((c.selector, c.condition, c.n), []).append(r.updates)
    return {key: float(np.mean(v)) for key, v in cells.items()}


@dataclass
class StylizedCheck:
    reaper_matches_oracle: bool
    per_matches_oracle_high: bool
    per_exceeds_oracle: dict
    uniform_largest: dict
    all_converged: bool

    @property
    def passed(self) -> bool:
        return (self.reaper_matches_oracle and self.per_matches_oracle_high and self.all_converged
                and all(self.per_exceeds_oracle.values()) and all(self.uniform_largest.values()))


def check_results(results) -> StylizedCheck:
    reaper_ok = all(r.excess == 0 for r in results if r.config.selector is Selector.REAPER_GREEDY)
    per_high_ok = all(r.excess == 0 for r in results
                      if r.config.selector is Selector.PER_GREEDY and r.config.condition is Condition.HIGH)
    means = summarize(results)
    oracle = {}
    for r in results:
        oracle.setdefault(r.config.condition, []).append(r.oracle_updates)
    per_exceeds = {c.value: bool(means[(Selector.PER_GREEDY, c)] > np.mean(oracle[c]))
                   for c in (Condition.MEDIUM, Condition.LOW) if (Selector.PER_GREEDY, c) in means}
    uniform_largest = {}
    for c in Condition:
        if (Selector.UNIFORM, c) not in means:
            continue
        others = [means[(s, c)] for s in Selector if s is not Selector.UNIFORM and (s, c) in means]
        uniform_largest[c.value] = all(means[(Selector.UNIFORM, c)] > m for m in others)
    return StylizedCheck(reaper_ok, per_high_ok, per_exceeds, uniform_largest,
                         all(r.converged for r in results))
