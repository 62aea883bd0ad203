"""Gaussian simulation scenarios, Monte Carlo studies, and baselines.

Inliers are N(0, I_dim), outliers N(mu1 * 1, I_dim); an agent batch mixes
the two with a binomial outlier count driven by its contamination factor.
Replicate r of a study draws everything from an RNG stream seeded by
(seed, r), so parallel and serial execution aggregate identically and any
single replicate can be regenerated in isolation.

Also here: the classical two-sample baselines (Kolmogorov-Smirnov and
permutation tests), the exact enumeration oracle validating the negative
hypergeometric numerics, and the deterministic Gaussian agent-data source
that backs protocol runs.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .conformal import Datapoint, conformal_pvalues, split_fit
from .contamtest import ContamTestSpec, run_contam_test
from .errors import ConfigurationError
from .mht import PValueVector, bh, storey_bh
from .protocol import AgentBatch, trainer_from_tag
from .statdist import NhgParams

__all__ = [
    "GaussianSource",
    "McReport",
    "ScenarioConfig",
    "gen_scenario",
    "ks_statistic",
    "ks_two_sample",
    "l2_ecdf_statistic",
    "mc_fdr_tdr",
    "mc_power",
    "null_agent_mask",
    "oracle_nhg_enumeration",
    "permutation_two_sample",
]

TEST_FAMILIES = ("storey", "quantile", "fisher", "sum")


@dataclass(frozen=True)
class ScenarioConfig:
    """One Gaussian simulation cell.

    Contamination factors follow ``pi_rule``: "fixed" takes ``pi_values``
    verbatim, "split" gives the first k0 agents pi0 and the rest pi1, and
    "uniform" redraws iid standard uniforms each replicate.
    ``count_rule`` picks how many points of a batch are outliers:
    "per_batch" draws Binomial(m, pi) per batch, "per_2m" draws
    Binomial(2m, pi) over an agent's two-round pool and slices the first m.
    """

    n: int
    m: int
    k: int = 1
    ell: int = 0
    dim: int = 2
    mu1: float = 4.0
    pi_rule: str = "fixed"
    pi_values: tuple[float, ...] | None = None
    k0: int | None = None
    pi0: float | None = None
    pi1: float | None = None
    pi_th: float = 0.0
    alpha: float = 0.05
    gamma: float = 0.5
    lam: float | None = None
    i0: int | None = None
    fisher_formula: str = "derived"
    replicates: int = 1000
    seed: int = 0
    count_rule: str = "per_batch"
    score: str = "negnorm"

    def __post_init__(self) -> None:
        if self.ell < 0 or self.n <= self.ell:
            raise ConfigurationError(f"need 0 <= ell < n, got ell={self.ell}, n={self.n}")
        if self.m < 1 or self.k < 1 or self.dim < 1:
            raise ConfigurationError("m, k, dim must all be >= 1")
        if self.replicates < 1:
            raise ConfigurationError(f"replicates must be >= 1, got {self.replicates}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.count_rule not in ("per_batch", "per_2m"):
            raise ConfigurationError(f"unknown count_rule {self.count_rule!r}")
        if self.pi_rule == "fixed":
            if self.pi_values is None or len(self.pi_values) != self.k:
                raise ConfigurationError(
                    "pi_rule='fixed' needs pi_values of length k"
                )
        elif self.pi_rule == "split":
            if self.k0 is None or self.pi0 is None or self.pi1 is None:
                raise ConfigurationError("pi_rule='split' needs k0, pi0, pi1")
            if not 0 <= self.k0 <= self.k:
                raise ConfigurationError(f"k0 must lie in [0, {self.k}]")
        elif self.pi_rule != "uniform":
            raise ConfigurationError(f"unknown pi_rule {self.pi_rule!r}")

    @property
    def n_cal(self) -> int:
        return self.n - self.ell


def _resolve_pis(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    if config.pi_rule == "fixed":
        return np.asarray(config.pi_values, dtype=float)
    if config.pi_rule == "split":
        pis = np.full(config.k, float(config.pi1))
        pis[: config.k0] = float(config.pi0)
        return pis
    return rng.uniform(size=config.k)


def null_agent_mask(config: ScenarioConfig) -> np.ndarray:
    """True where the agent's contamination factor is at or below pi_th.

    Only static rules have a fixed ground truth; the "uniform" rule redraws
    factors each replicate and has no per-study mask.
    """
    if config.pi_rule == "uniform":
        raise ConfigurationError("no static ground truth under pi_rule='uniform'")
    rng = np.random.default_rng(0)  # unused by static rules
    return _resolve_pis(config, rng) <= config.pi_th


def _batch_mask(config: ScenarioConfig, pi: float, rng: np.random.Generator) -> np.ndarray:
    if config.count_rule == "per_2m":
        mask2 = np.zeros(2 * config.m, dtype=bool)
        mask2[: rng.binomial(2 * config.m, pi)] = True
        rng.shuffle(mask2)
        return mask2[: config.m]
    mask = np.zeros(config.m, dtype=bool)
    mask[: rng.binomial(config.m, pi)] = True
    rng.shuffle(mask)
    return mask


def gen_scenario(
    config: ScenarioConfig, replicate_index: int
) -> tuple[list[Datapoint], list[AgentBatch], list[np.ndarray]]:
    """Null sample, per-agent round-1 batches, and per-point outlier masks."""
    rng = np.random.default_rng([config.seed, int(replicate_index)])
    pis = _resolve_pis(config, rng)
    null_feats = rng.standard_normal((config.n, config.dim))
    null_sample = [Datapoint(f) for f in null_feats]
    batches, masks = [], []
    for a in range(config.k):
        mask = _batch_mask(config, pis[a], rng)
        feats = rng.standard_normal((config.m, config.dim))
        feats[mask] += config.mu1
        batches.append(
            AgentBatch(
                agent_id=f"agent{a:03d}", points=[Datapoint(f) for f in feats]
            )
        )
        masks.append(mask)
    return null_sample, batches, masks


def _spec_for(config: ScenarioConfig, family: str) -> ContamTestSpec:
    return ContamTestSpec(
        family=family,
        pi_th=config.pi_th,
        lam=config.lam,
        i0=config.i0,
        fisher_formula=config.fisher_formula,
    )


@dataclass
class McReport:
    """Point estimates with standard errors plus the raw per-replicate rows."""

    study: str
    families: tuple[str, ...]
    procedure: str | None
    estimates: dict
    replicates: int
    runtime_seconds: float
    rows: list[dict] = field(default_factory=list, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "study": self.study,
            "families": list(self.families),
            "procedure": self.procedure,
            "estimates": self.estimates,
            "replicates": self.replicates,
            "runtime_seconds": self.runtime_seconds,
        }


def _binom_se(p_hat: float, r: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / r)


def _as_families(families) -> tuple[str, ...]:
    fams = (families,) if isinstance(families, str) else tuple(families)
    for f in fams:
        if f not in TEST_FAMILIES:
            raise ConfigurationError(f"unknown family {f!r}; expected {TEST_FAMILIES}")
    if not fams:
        raise ConfigurationError("need at least one family")
    return fams


def _power_replicate(config: ScenarioConfig, families, idx: int) -> list[dict]:
    null_sample, batches, _ = gen_scenario(config, idx)
    cal = split_fit(null_sample, config.ell, trainer_from_tag(config.score))
    pv = conformal_pvalues(cal, batches[0].points)
    rows = []
    for fam in families:
        res = run_contam_test(pv, _spec_for(config, fam), cal.n_cal)
        rows.append(
            {
                "replicate": idx,
                "family": fam,
                "statistic": res.statistic,
                "p_value": res.p_value,
                "reject": int(res.p_value <= config.alpha),
            }
        )
    return rows


def _power_chunk(args) -> list[dict]:
    config, families, start, stop = args
    out = []
    for idx in range(start, stop):
        out.extend(_power_replicate(config, families, idx))
    return out


def _fdr_replicate(config: ScenarioConfig, families, procedure: str, idx: int) -> list[dict]:
    null_sample, batches, _ = gen_scenario(config, idx)
    cal = split_fit(null_sample, config.ell, trainer_from_tag(config.score))
    pvs = [conformal_pvalues(cal, b.points) for b in batches]
    ids = [b.agent_id for b in batches]
    null_mask = null_agent_mask(config)
    k0 = int(null_mask.sum())
    rows = []
    for fam in families:
        spec = _spec_for(config, fam)
        us = [run_contam_test(pv, spec, cal.n_cal).p_value for pv in pvs]
        pvec = PValueVector.make(us, ids)
        if procedure == "bh":
            outcome = bh(pvec, config.alpha)
        else:
            outcome = storey_bh(pvec, config.alpha, config.gamma)
        v = sum(1 for aid, is_null in zip(ids, null_mask) if is_null and aid in outcome.rejected)
        s = len(outcome.rejected) - v
        rows.append(
            {
                "replicate": idx,
                "family": fam,
                "V": v,
                "S": s,
                "R": len(outcome.rejected),
                "fdp": v / max(1, len(outcome.rejected)),
                "tdp": s / max(1, config.k - k0),
            }
        )
    return rows


def _fdr_chunk(args) -> list[dict]:
    config, families, procedure, start, stop = args
    out = []
    for idx in range(start, stop):
        out.extend(_fdr_replicate(config, families, procedure, idx))
    return out


def _run_chunked(worker, static_args: tuple, replicates: int, threads: int) -> list[dict]:
    if threads <= 1:
        return worker(static_args + (0, replicates))
    bounds = np.linspace(0, replicates, threads + 1).astype(int)
    chunks = [
        static_args + (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b
    ]
    rows: list[dict] = []
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for part in pool.map(worker, chunks):
            rows.extend(part)
    return rows


def mc_power(config: ScenarioConfig, families, threads: int = 1) -> McReport:
    """Single-hypothesis power study: fraction of replicates with u <= alpha."""
    if config.k != 1:
        raise ConfigurationError("power study runs with a single agent (k=1)")
    families = _as_families(families)
    start = time.perf_counter()
    rows = _run_chunked(_power_chunk, (config, families), config.replicates, threads)
    estimates = {}
    for fam in families:
        rejects = [r["reject"] for r in rows if r["family"] == fam]
        p_hat = float(np.mean(rejects))
        estimates[fam] = {
            "power": {"value": p_hat, "se": _binom_se(p_hat, config.replicates)}
        }
    return McReport(
        study="power",
        families=families,
        procedure=None,
        estimates=estimates,
        replicates=config.replicates,
        runtime_seconds=time.perf_counter() - start,
        rows=rows,
    )


def mc_fdr_tdr(
    config: ScenarioConfig, families, procedure: str = "storey_bh", threads: int = 1
) -> McReport:
    """Multiple-testing study: empirical FDR and TDR against ground truth."""
    if config.k < 2:
        raise ConfigurationError("FDR/TDR study needs at least two agents")
    if procedure not in ("bh", "storey_bh"):
        raise ConfigurationError(f"unknown procedure {procedure!r}")
    null_agent_mask(config)  # fail fast if ground truth is undefined
    families = _as_families(families)
    start = time.perf_counter()
    rows = _run_chunked(
        _fdr_chunk, (config, families, procedure), config.replicates, threads
    )
    estimates = {}
    for fam in families:
        fdps = [r["fdp"] for r in rows if r["family"] == fam]
        tdps = [r["tdp"] for r in rows if r["family"] == fam]
        fdr_hat, tdr_hat = float(np.mean(fdps)), float(np.mean(tdps))
        estimates[fam] = {
            "fdr": {"value": fdr_hat, "se": _binom_se(fdr_hat, config.replicates)},
            "tdr": {"value": tdr_hat, "se": _binom_se(tdr_hat, config.replicates)},
        }
    return McReport(
        study="fdr_tdr",
        families=families,
        procedure=procedure,
        estimates=estimates,
        replicates=config.replicates,
        runtime_seconds=time.perf_counter() - start,
        rows=rows,
    )


# -- two-sample baselines ---------------------------------------------------


def _ecdf_on(sample: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(sample), grid, side="right") / sample.size


def ks_two_sample(sample_a, sample_b) -> tuple[float, float]:
    """KS statistic sup|F_a - F_b| and its asymptotic p-value.

    The p-value inverts the threshold sqrt(-ln(alpha/2) (n+m)/(2nm)):
    p = min(1, 2 exp(-2nm D^2 / (n+m))).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.sort(np.concatenate([a, b]))
    stat = float(np.max(np.abs(_ecdf_on(a, grid) - _ecdf_on(b, grid))))
    p = min(1.0, 2.0 * math.exp(-2.0 * a.size * b.size * stat**2 / (a.size + b.size)))
    return stat, p


def ks_statistic(sample_a, sample_b) -> float:
    return ks_two_sample(sample_a, sample_b)[0]


def l2_ecdf_statistic(sample_a, sample_b) -> float:
    """L2 norm of the ECDF difference over the pooled sample."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.sort(np.concatenate([a, b]))
    diff = _ecdf_on(a, grid) - _ecdf_on(b, grid)
    return float(math.sqrt(np.mean(diff * diff)))


def permutation_two_sample(
    sample_a,
    sample_b,
    statistic: Callable[[np.ndarray, np.ndarray], float] = ks_statistic,
    n_perm: int = 500,
    seed: int = 0,
) -> float:
    """Permutation p-value p = (1 + #{T_i >= T_obs}) / (n_perm + 1).

    The add-one form keeps the p-value valid at any finite number of
    permutations; seeded, hence deterministic.
    """
    if n_perm < 1:
        raise ConfigurationError(f"n_perm must be >= 1, got {n_perm}")
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    t_obs = statistic(a, b)
    pool = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(pool.size)
        if statistic(pool[perm[: a.size]], pool[perm[a.size :]]) >= t_obs:
            count += 1
    return (1 + count) / (n_perm + 1)


# -- validation oracle ------------------------------------------------------


def oracle_nhg_enumeration(params: NhgParams) -> list[Fraction]:
    """Exact rational CDF of the negative hypergeometric by enumeration.

    Walks every arrangement of failure positions among the
    population_size draw slots (all equally likely), counts successes
    before the r-th failure, and accumulates exact fractions.  Refuses
    populations above 10 - the count of arrangements explodes.
    """
    big_n, ks, r = params.population_size, params.success_states, params.failures
    if big_n > 10:
        raise ValueError("enumeration oracle refuses population_size > 10")
    counts = [0] * (ks + 1)
    if r == 0:
        counts[ks] = 1
        total = 1
    else:
        fail_positions = list(combinations(range(big_n), big_n - ks))
        total = len(fail_positions)
        for positions in fail_positions:
            stop = positions[r - 1]  # 0-based slot of the r-th failure
            counts[stop - (r - 1)] += 1
    cdf, acc = [], Fraction(0)
    for c in counts:
        acc += Fraction(c, total)
        cdf.append(acc)
    return cdf


# -- protocol data source ---------------------------------------------------


class GaussianSource:
    """Deterministic Gaussian agent-data source for protocol runs.

    Rounds 1 and 2 for an agent slice one pre-drawn pool of 2m points whose
    outlier count is Binomial(2m, pi_k); rounds beyond 2 draw fresh batches
    with per-batch Binomial(m, pi_k) counts.  Batches depend only on
    (seed, agent index, round), never on call order.

    With ``labeled=True`` the inlier distribution becomes an equal two-class
    mixture (class 1 shifted by class_shift along the first axis) and
    outliers are systematically mislabeled as class 0, so contaminated data
    sneaking into training drags that class centroid away and costs the
    nearest-centroid evaluator real accuracy.
    """

    def __init__(
        self,
        n: int,
        m: int,
        k: int,
        seed: int,
        dim: int = 2,
        mu1: float = 4.0,
        pi_rule: str = "uniform",
        pi_values: Sequence[float] | None = None,
        k0: int | None = None,
        pi0: float | None = None,
        pi1: float | None = None,
        labeled: bool = False,
        class_shift: float = 3.0,
    ) -> None:
        if seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {seed}")
        self.n, self.m, self.k = n, m, k
        self.seed, self.dim, self.mu1 = seed, dim, mu1
        self.labeled, self.class_shift = labeled, class_shift
        rng = np.random.default_rng([seed, 0])
        if pi_rule == "uniform":
            self.pis = rng.uniform(size=k)
        elif pi_rule == "fixed":
            if pi_values is None or len(pi_values) != k:
                raise ConfigurationError("pi_rule='fixed' needs pi_values of length k")
            self.pis = np.asarray(pi_values, dtype=float)
        elif pi_rule == "split":
            if k0 is None or pi0 is None or pi1 is None:
                raise ConfigurationError("pi_rule='split' needs k0, pi0, pi1")
            self.pis = np.full(k, float(pi1))
            self.pis[:k0] = float(pi0)
        else:
            raise ConfigurationError(f"unknown pi_rule {pi_rule!r}")
        self._ids = [f"agent{i:03d}" for i in range(k)]
        self._pools: dict[int, list[Datapoint]] = {}

    def agent_ids(self) -> list[str]:
        return list(self._ids)

    def _inliers(self, rng: np.random.Generator, count: int) -> list[Datapoint]:
        feats = rng.standard_normal((count, self.dim))
        if not self.labeled:
            return [Datapoint(f) for f in feats]
        labels = rng.integers(0, 2, size=count)
        feats[:, 0] += self.class_shift * labels
        return [Datapoint(f, label=int(lab)) for f, lab in zip(feats, labels)]

    def local_sample(self) -> list[Datapoint]:
        return self._inliers(np.random.default_rng([self.seed, 1]), self.n)

    def _pool(self, idx: int) -> list[Datapoint]:
        if idx not in self._pools:
            rng = np.random.default_rng([self.seed, 2, idx])
            mask = np.zeros(2 * self.m, dtype=bool)
            mask[: rng.binomial(2 * self.m, self.pis[idx])] = True
            rng.shuffle(mask)
            points = self._inliers(rng, 2 * self.m)
            out_feats = rng.standard_normal((int(mask.sum()), self.dim)) + self.mu1
            for slot, feat in zip(np.nonzero(mask)[0], out_feats):
                points[slot] = Datapoint(feat, label=0 if self.labeled else None)
            self._pools[idx] = points
        return self._pools[idx]

    def batch(self, agent_id: str, round_index: int) -> AgentBatch:
        if agent_id not in self._ids:
            raise ValueError(f"unknown agent {agent_id!r}")
        if round_index < 1:
            raise ValueError(f"round_index must be >= 1, got {round_index}")
        idx = self._ids.index(agent_id)
        if round_index <= 2:
            pool = self._pool(idx)
            points = pool[: self.m] if round_index == 1 else pool[self.m :]
            return AgentBatch(agent_id=agent_id, points=list(points))
        rng = np.random.default_rng([self.seed, 3, idx, round_index])
        mask = np.zeros(self.m, dtype=bool)
        mask[: rng.binomial(self.m, self.pis[idx])] = True
        rng.shuffle(mask)
        points = self._inliers(rng, self.m)
        out_feats = rng.standard_normal((int(mask.sum()), self.dim)) + self.mu1
        for slot, feat in zip(np.nonzero(mask)[0], out_feats):
            points[slot] = Datapoint(feat, label=0 if self.labeled else None)
        return AgentBatch(agent_id=agent_id, points=points)
