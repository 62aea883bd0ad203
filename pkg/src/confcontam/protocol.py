"""Multi-round collaborative data-sharing procedure.

One requester holds a local null sample.  In round 1 every agent sends a
batch of m points; the requester fits a conformal score on its own fit
split, turns each batch into conformal p-values and a contamination test
result, then selects collaborators either by fixed budget (largest
non-contamination statistics) or by contamination threshold (complement of
the Storey-BH rejection set over the per-agent p-values).  Later rounds
acquire data only from the selected set; a data-subset-selection hook and a
pluggable evaluator close the loop before model training.

Selection never observes the true contamination factors; those live only
in the simulation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .conformal import (
    ConformalCalibration,
    Datapoint,
    ScoreTrainer,
    conformal_pvalues,
    knn_distance_trainer,
    negative_norm_trainer,
    split_fit,
    split_sample,
    stack_features,
)
from .contamtest import ContamTestSpec, run_contam_test
from .errors import ConfigurationError, ProtocolRunError, SourceExhausted
from .mht import MultipleTestOutcome, PValueVector, storey_bh, storey_fdr_estimate

__all__ = [
    "AgentAssessment",
    "AgentBatch",
    "AgentDataSource",
    "ProtocolConfig",
    "ProtocolReport",
    "SelectionDecision",
    "assess_round1",
    "budget_by_validation",
    "nearest_centroid_evaluator",
    "run_procedure",
    "select_fixed_budget",
    "select_threshold",
    "trainer_from_tag",
]

PROTOCOL_CONFIG_FIELDS = (
    "ell",
    "n",
    "m",
    "score",
    "test",
    "mode",
    "k_budget",
    "alpha",
    "gamma",
    "pi_th",
    "rounds",
    "seed",
)


@dataclass
class AgentBatch:
    agent_id: str
    points: list[Datapoint]


@dataclass
class AgentAssessment:
    """Round-1 verdict on one agent; ``error`` marks an unusable batch."""

    agent_id: str
    statistic: float | None = None
    p_value: float | None = None
    conformal_pvalues: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SelectionDecision:
    """Agents kept for later rounds, in selection order."""

    selected: list[str]
    mode: str  # "budget" | "threshold"
    fdr_estimate: float | None = None
    mht_outcome: MultipleTestOutcome | None = None
    warning: str | None = None


def trainer_from_tag(tag: str, k_nn: int = 5) -> ScoreTrainer:
    if tag == "negnorm":
        return negative_norm_trainer
    if tag == "knn":
        return knn_distance_trainer(k_nn)
    raise ConfigurationError(f"unknown score tag {tag!r}; expected negnorm or knn")


def assess_round1(
    cal: ConformalCalibration,
    batches: Sequence[AgentBatch],
    spec: ContamTestSpec,
) -> list[AgentAssessment]:
    """Score every round-1 batch independently (no cross-agent pooling).

    An empty batch is recorded as a per-agent error and takes no further
    part in selection.
    """
    out = []
    for batch in batches:
        if len(batch.points) == 0:
            out.append(AgentAssessment(agent_id=batch.agent_id, error="empty batch"))
            continue
        pv = conformal_pvalues(cal, batch.points)
        result = run_contam_test(pv, spec, cal.n_cal)
        out.append(
            AgentAssessment(
                agent_id=batch.agent_id,
                statistic=result.statistic,
                p_value=result.p_value,
                conformal_pvalues=pv,
            )
        )
    return out


def _selection_order(assessments: Sequence[AgentAssessment]) -> list[AgentAssessment]:
    # total order: statistic desc, then p-value asc, then agent id asc
    return sorted(
        (a for a in assessments if a.ok),
        key=lambda a: (-a.statistic, a.p_value, a.agent_id),
    )


def select_fixed_budget(
    assessments: Sequence[AgentAssessment],
    k_budget: int,
    gamma: float = 0.5,
    delta: float | None = None,
) -> SelectionDecision:
    """Keep the k_budget agents with the largest non-contamination statistics.

    Ties break by smaller contamination p-value, then agent id.  The
    decision carries the direct FDR estimate for the implied rejection set
    (the non-selected agents): delta defaults to the largest p-value among
    them, and the estimate is omitted when nobody is left out.
    """
    if k_budget < 1:
        raise ConfigurationError(f"k_budget must be >= 1, got {k_budget}")
    order = _selection_order(assessments)
    warning = None
    if k_budget > len(order):
        warning = (
            f"k_budget={k_budget} exceeds the {len(order)} assessable agents; "
            "selecting all"
        )
    selected = order[:k_budget]
    unselected = order[k_budget:]
    fdr_estimate = None
    if unselected:
        if delta is None:
            delta = max(a.p_value for a in unselected)
        pvec = PValueVector.make(
            [a.p_value for a in order], [a.agent_id for a in order]
        )
        fdr_estimate = storey_fdr_estimate(pvec, delta, gamma)
    return SelectionDecision(
        selected=[a.agent_id for a in selected],
        mode="budget",
        fdr_estimate=fdr_estimate,
        warning=warning,
    )


def select_threshold(
    assessments: Sequence[AgentAssessment], alpha: float, gamma: float
) -> SelectionDecision:
    """Keep the complement of the Storey-BH rejection set over the p-values."""
    ok = [a for a in assessments if a.ok]
    if not ok:
        return SelectionDecision(selected=[], mode="threshold")
    pvec = PValueVector.make([a.p_value for a in ok], [a.agent_id for a in ok])
    outcome = storey_bh(pvec, alpha, gamma)
    selected = [a.agent_id for a in ok if a.agent_id not in outcome.rejected]
    return SelectionDecision(selected=selected, mode="threshold", mht_outcome=outcome)


class AgentDataSource(Protocol):
    """Deterministic provider of the local sample and per-round agent batches."""

    def agent_ids(self) -> list[str]: ...

    def local_sample(self) -> list[Datapoint]: ...

    def batch(self, agent_id: str, round_index: int) -> AgentBatch: ...


@dataclass
class ProtocolConfig:
    """Inputs of a full protocol run.

    ``rounds`` counts data-acquisition rounds including round 1; selection
    happens once, after round 1, and rounds 2..rounds acquire from the
    selected set only.
    """

    ell: int
    n: int
    m: int
    score: str
    test: str
    mode: str
    pi_th: float
    k_budget: int | None = None
    alpha: float | None = None
    gamma: float | None = None
    rounds: int = 2
    seed: int = 0
    lam: float | None = None
    i0: int | None = None
    k_nn: int = 5

    def __post_init__(self) -> None:
        if self.ell < 0 or self.n <= self.ell:
            raise ConfigurationError(
                f"need 0 <= ell < n, got ell={self.ell}, n={self.n}"
            )
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if self.rounds < 2:
            raise ConfigurationError(f"rounds must be >= 2, got {self.rounds}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.mode == "budget":
            if self.k_budget is None or self.k_budget < 1:
                raise ConfigurationError("budget mode requires k_budget >= 1")
        elif self.mode == "threshold":
            if self.alpha is None or self.gamma is None:
                raise ConfigurationError("threshold mode requires alpha and gamma")
        else:
            raise ConfigurationError(
                f"mode must be 'budget' or 'threshold', got {self.mode!r}"
            )

    def test_spec(self) -> ContamTestSpec:
        return ContamTestSpec(
            family=self.test, pi_th=self.pi_th, lam=self.lam, i0=self.i0
        )

    def to_json_dict(self) -> dict:
        return {
            "ell": self.ell,
            "n": self.n,
            "m": self.m,
            "score": self.score,
            "test": self.test,
            "mode": self.mode,
            "k_budget": self.k_budget,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "pi_th": self.pi_th,
            "rounds": self.rounds,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProtocolConfig":
        extras = {"lambda": "lam", "i0": "i0", "k_nn": "k_nn"}
        unknown = set(doc) - set(PROTOCOL_CONFIG_FIELDS) - set(extras) - {"scenario"}
        if unknown:
            raise ConfigurationError(f"unknown protocol config keys: {sorted(unknown)}")
        missing = [k for k in PROTOCOL_CONFIG_FIELDS if k not in doc]
        if missing:
            raise ConfigurationError(f"missing protocol config keys: {missing}")
        kwargs = {k: doc[k] for k in PROTOCOL_CONFIG_FIELDS}
        for json_key, attr in extras.items():
            if doc.get(json_key) is not None:
                kwargs[attr] = doc[json_key]
        return cls(**kwargs)


@dataclass
class ProtocolReport:
    """Everything a run produced, JSON-serializable and seed-deterministic."""

    config: ProtocolConfig
    assessments: list[AgentAssessment]
    decision: SelectionDecision | None
    acquisitions: list[dict] = field(default_factory=list)
    local_count: int = 0
    acquired_count: int = 0
    total_training_points: int = 0
    evaluator_output: Any = None
    partial: bool = False
    error: str | None = None

    def to_json_dict(self) -> dict:
        decision = None
        if self.decision is not None:
            outcome = self.decision.mht_outcome
            decision = {
                "selected": list(self.decision.selected),
                "mode": self.decision.mode,
                "fdr_estimate": self.decision.fdr_estimate,
                "warning": self.decision.warning,
                "mht": None
                if outcome is None
                else {
                    "rejected": sorted(outcome.rejected),
                    "kappa": outcome.kappa,
                    "k0_hat": outcome.k0_hat,
                },
            }
        return {
            "config": self.config.to_json_dict(),
            "assessments": [
                {
                    "agent_id": a.agent_id,
                    "statistic": a.statistic,
                    "p_value": a.p_value,
                    "error": a.error,
                }
                for a in self.assessments
            ],
            "decision": decision,
            "acquisitions": list(self.acquisitions),
            "totals": {
                "local": self.local_count,
                "acquired": self.acquired_count,
                "training": self.total_training_points,
            },
            "evaluator_output": self.evaluator_output,
            "partial": self.partial,
            "error": self.error,
        }


def run_procedure(
    config: ProtocolConfig,
    source: AgentDataSource,
    evaluator: Callable[[list[Datapoint], list[Datapoint]], Any] | None = None,
    subset_selector: Callable[[list[Datapoint]], list[Datapoint]] | None = None,
) -> ProtocolReport:
    """Execute the full data-sharing procedure against a data source.

    Steps: fit the score on the local fit split, assess every agent's
    round-1 batch, select collaborators, acquire rounds 2..rounds from the
    selected set, pass the acquired pool through the subset-selection hook
    (identity by default), and hand the combined training data to the
    evaluator if one is given (it also receives the calibration split as
    validation data).  Source exhaustion mid-round raises ProtocolRunError
    carrying the partial report.
    """
    local = source.local_sample()
    if len(local) != config.n:
        raise ConfigurationError(
            f"source yielded {len(local)} local points but config.n={config.n}"
        )
    split = split_sample(local, config.ell)
    trainer = trainer_from_tag(config.score, config.k_nn)
    cal = split_fit(local, config.ell, trainer)
    spec = config.test_spec()

    report = ProtocolReport(
        config=config, assessments=[], decision=None, local_count=config.n
    )
    agent_ids = source.agent_ids()
    round1: list[AgentBatch] = []
    for aid in agent_ids:
        try:
            round1.append(source.batch(aid, 1))
        except SourceExhausted as exc:
            report.partial = True
            report.error = f"source exhausted in round 1 for {aid}: {exc}"
            raise ProtocolRunError(report.error, report=report) from exc
    report.acquisitions = [
        {"round": 1, "agent_id": b.agent_id, "count": len(b.points)} for b in round1
    ]
    report.assessments = assess_round1(cal, round1, spec)

    if config.mode == "budget":
        decision = select_fixed_budget(
            report.assessments,
            config.k_budget,
            gamma=config.gamma if config.gamma is not None else 0.5,
        )
    else:
        decision = select_threshold(report.assessments, config.alpha, config.gamma)
    report.decision = decision

    selected_round1 = [b for b in round1 if b.agent_id in set(decision.selected)]
    acquired: list[Datapoint] = [p for b in selected_round1 for p in b.points]
    for round_index in range(2, config.rounds + 1):
        for aid in decision.selected:
            try:
                batch = source.batch(aid, round_index)
            except SourceExhausted as exc:
                report.partial = True
                report.error = (
                    f"source exhausted in round {round_index} for {aid}: {exc}"
                )
                report.acquired_count = len(acquired)
                raise ProtocolRunError(report.error, report=report) from exc
            report.acquisitions.append(
                {"round": round_index, "agent_id": aid, "count": len(batch.points)}
            )
            acquired.extend(batch.points)

    if subset_selector is not None:
        acquired = subset_selector(acquired)
    report.acquired_count = len(acquired)
    training = list(local) + acquired
    report.total_training_points = len(training)
    if evaluator is not None:
        report.evaluator_output = evaluator(training, split.calibration_part)
    return report


def nearest_centroid_evaluator(
    train: Sequence[Datapoint], validation: Sequence[Datapoint]
) -> float:
    """Accuracy of a nearest-centroid classifier fit on ``train``.

    Only relative ordering across candidate training sets matters for
    budget selection, so the simplest consistent classifier does the job.
    """
    labeled = [p for p in train if p.label is not None]
    if not labeled:
        raise ConfigurationError("nearest-centroid evaluator needs labeled data")
    labels = sorted({p.label for p in labeled})
    centroids = np.stack(
        [
            stack_features([p for p in labeled if p.label == lab]).mean(axis=0)
            for lab in labels
        ]
    )
    val = [p for p in validation if p.label is not None]
    if not val:
        raise ConfigurationError("validation set has no labeled points")
    feats = stack_features(val)
    diffs = feats[:, None, :] - centroids[None, :, :]
    nearest = np.argmin(np.sum(diffs * diffs, axis=2), axis=1)
    predicted = np.array([labels[i] for i in nearest])
    truth = np.array([p.label for p in val])
    return float(np.mean(predicted == truth))


def budget_by_validation(
    config: ProtocolConfig,
    source: AgentDataSource,
    budget_grid: Sequence[int],
    evaluator: Callable[[Sequence[Datapoint], Sequence[Datapoint]], float] | None = None,
) -> int:
    """Pick k_budget by validation accuracy.

    For each candidate budget: take that many top-ordered agents, train the
    evaluator's model on the fit split plus their round-1 data, score it on
    the calibration split, and return the grid argmax (ties go to the
    smallest budget).  Round-1 batches are fetched once and reused across
    the grid.
    """
    if not budget_grid:
        raise ConfigurationError("budget_grid must be nonempty")
    if evaluator is None:
        evaluator = nearest_centroid_evaluator
    local = source.local_sample()
    if len(local) != config.n:
        raise ConfigurationError(
            f"source yielded {len(local)} local points but config.n={config.n}"
        )
    split = split_sample(local, config.ell)
    trainer = trainer_from_tag(config.score, config.k_nn)
    cal = split_fit(local, config.ell, trainer)
    round1 = {aid: source.batch(aid, 1) for aid in source.agent_ids()}
    assessments = assess_round1(cal, list(round1.values()), config.test_spec())
    order = [a.agent_id for a in _selection_order(assessments)]

    best_budget = None
    best_score = -np.inf
    for k_budget in sorted(set(int(b) for b in budget_grid)):
        if k_budget < 1:
            raise ConfigurationError(f"budgets must be >= 1, got {k_budget}")
        chosen = order[:k_budget]
        train = list(split.fit_part) + [
            p for aid in chosen for p in round1[aid].points
        ]
        score = evaluator(train, split.calibration_part)
        if score > best_score:
            best_score = score
            best_budget = k_budget
    return best_budget
