"""The boosted verifier: did a black-box classifier train on marked data?

Each audit round samples n auxiliary images (never of the audited class),
marks each image once with the true mark t and once with the external
control mark t', queries the endpoint with both versions, and runs a
one-sided test on the audited class's probability (or rank) shift.  The
audit passes when more than a delta fraction of Q rounds are significant
at level lambda, which drives the boosted false-positive rate to roughly
P(Binomial(Q, lambda) > delta*Q) under the null.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .imgdata import LabeledDataset, Rng
from .marks import MarkSpec, insert_mark_batch
from .model import QueryOutput, as_endpoint, ranks_for_label
from .stats import (
    TestResult,
    paired_one_sided_ttest,
    rank_shift_test,
    unpaired_one_sided_ttest,
)

_MODES = ("probability", "rank", "unpaired")


class AuditError(RuntimeError):
    """A verification run could not be completed."""


class EndpointRoundError(AuditError):
    """The endpoint failed mid-audit; carries the failing round index."""

    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"endpoint failed in audit round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause


class LabelTieError(AuditError):
    """Candidate-label probing found no majority."""

    def __init__(self, candidates: Sequence[int], fraction: float):
        super().__init__(
            f"no majority label: candidates {sorted(candidates)} tied at {fraction:.2f}"
        )
        self.candidates = sorted(int(c) for c in candidates)
        self.fraction = fraction


@dataclass(frozen=True)
class VerifierConfig:
    """Audit parameters: (lambda, delta, Q, n) and the test mode.

    With ``significance`` unset, probability and rank audits default to
    lambda = 0.1; unpaired audits (physical marks on disjoint image sets)
    default to the looser lambda = 0.4 that setting calls for.
    """

    significance: Optional[float] = None  # lambda: per-round p-value threshold
    positive_fraction: float = 0.6  # delta: required fraction of positive rounds
    rounds: int = 5  # Q
    sample_size: int = 250  # n images per round
    mode: str = "probability"  # probability | rank | unpaired
    top_k: Optional[int] = None  # rank mode's K; must match the endpoint's

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.significance is None:
            object.__setattr__(
                self, "significance", 0.4 if self.mode == "unpaired" else 0.1
            )
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must be in (0, 1)")
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.sample_size < 2:
            raise ValueError("sample_size must be >= 2")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def to_dict(self) -> dict:
        return {
            "significance": self.significance,
            "positive_fraction": self.positive_fraction,
            "rounds": self.rounds,
            "sample_size": self.sample_size,
            "mode": self.mode,
            "top_k": self.top_k,
        }


@dataclass
class AuditReport:
    """Per-round p-values plus the boosted verdict."""

    p_values: list[float]
    positives: int
    verdict: int
    config: VerifierConfig
    query_count: int
    class_index: int
    mark_id: str
    external_id: str
    test_results: list[TestResult] = field(default_factory=list)

    def verdict_at(self, significance: Optional[float] = None,
                   positive_fraction: Optional[float] = None) -> int:
        """Re-evaluate the verdict from the recorded p-values.

        Lowering the significance threshold can only remove positives, so
        it can never flip a 0 verdict to 1.
        """
        lam = self.config.significance if significance is None else significance
        delta = (
            self.config.positive_fraction
            if positive_fraction is None
            else positive_fraction
        )
        c = sum(1 for p in self.p_values if p < lam)
        return 1 if c / len(self.p_values) > delta else 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "verdict": self.verdict,
                "positives": self.positives,
                "p_values": self.p_values,
                "query_count": self.query_count,
                "class_index": self.class_index,
                "mark_id": self.mark_id,
                "external_id": self.external_id,
                "config": self.config.to_dict(),
            }
        )


def _check_aux(d_aux: LabeledDataset, class_indices: Sequence[int]) -> None:
    for j in class_indices:
        if np.any(d_aux.labels == j):
            raise ValueError(
                f"auxiliary dataset must not contain images of audited class {j}"
            )


def _query(endpoint, images: np.ndarray, round_index: int) -> QueryOutput:
    try:
        out = endpoint.query(images)
    except Exception as exc:  # propagate with audit context
        raise EndpointRoundError(round_index, exc) from exc
    if len(out) != images.shape[0]:
        raise EndpointRoundError(
            round_index,
            AuditError(f"endpoint returned {len(out)} outputs for {images.shape[0]} inputs"),
        )
    return out


def _round_test(endpoint, images: np.ndarray, class_index: int, mark: MarkSpec,
                external: MarkSpec, mode: str, round_index: int) -> TestResult:
    if mode == "unpaired":
        half = images.shape[0] // 2
        out_t = _query(endpoint, insert_mark_batch(images[:half], mark), round_index)
        out_e = _query(endpoint, insert_mark_batch(images[half:], external), round_index)
        return unpaired_one_sided_ttest(
            out_t.probs[:, class_index], out_e.probs[:, class_index]
        )
    out_t = _query(endpoint, insert_mark_batch(images, mark), round_index)
    out_e = _query(endpoint, insert_mark_batch(images, external), round_index)
    if mode == "probability":
        return paired_one_sided_ttest(
            out_t.probs[:, class_index], out_e.probs[:, class_index]
        )
    # rank mode: better (smaller) rank under the true mark is the signal
    ranks_t = ranks_for_label(out_t, class_index)
    ranks_e = ranks_for_label(out_e, class_index)
    return rank_shift_test(ranks_t, ranks_e)


def verify(
    endpoint,
    d_aux: LabeledDataset,
    class_index: int,
    mark: MarkSpec,
    external: MarkSpec,
    config: VerifierConfig,
    rng: Rng,
) -> AuditReport:
    """Boosted audit of one (mark, class) hypothesis against a control mark.

    Samples without replacement within a round and independently across
    rounds; issues exactly 2 * n * Q queries.
    """
    endpoint = as_endpoint(endpoint)
    _check_aux(d_aux, [class_index])
    same_content = (
        mark.dims == external.dims
        and np.array_equal(mark.pattern, external.pattern)
        and np.array_equal(mark.mask, external.mask)
    )
    if mark.id == external.id or same_content:
        raise ValueError("true mark and external mark must differ")
    if not 0 <= class_index < endpoint.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    need = 2 * config.sample_size if config.mode == "unpaired" else config.sample_size
    if d_aux.n < need:
        raise ValueError(
            f"auxiliary dataset has {d_aux.n} images, round needs {need}"
        )
    expected = "topk" if config.mode == "rank" else "probs"
    if endpoint.mode != expected:
        raise ValueError(
            f"{config.mode} mode needs a {expected} endpoint, got {endpoint.mode}"
        )
    endpoint_k = getattr(endpoint, "k", None)
    if config.top_k is not None and endpoint_k is not None and config.top_k != endpoint_k:
        raise ValueError(
            f"config expects top-{config.top_k} outputs, endpoint serves top-{endpoint_k}"
        )

    gen = rng.generator()
    results: list[TestResult] = []
    queries = 0
    for q in range(config.rounds):
        idx = gen.choice(d_aux.n, size=need, replace=False)
        images = d_aux.images[idx]
        results.append(
            _round_test(endpoint, images, class_index, mark, external, config.mode, q)
        )
        queries += 2 * config.sample_size
    p_values = [r.p_value for r in results]
    positives = sum(1 for p in p_values if p < config.significance)
    verdict = 1 if positives / config.rounds > config.positive_fraction else 0
    return AuditReport(
        p_values=p_values,
        positives=positives,
        verdict=verdict,
        config=config,
        query_count=queries,
        class_index=class_index,
        mark_id=mark.id,
        external_id=external.id,
        test_results=results,
    )


def distinguish(
    endpoint,
    d_aux: LabeledDataset,
    marked_a: tuple[MarkSpec, int],
    marked_b: tuple[MarkSpec, int],
    config: VerifierConfig,
    rng: Rng,
) -> int:
    """1 iff each planted mark shifts only its own class, checked both ways.

    Runs the boosted audit of mark_a against mark_b on class a, and of
    mark_b against mark_a on class b, with the same (lambda, delta, Q, n).
    """
    mark_a, class_a = marked_a
    mark_b, class_b = marked_b
    if class_a == class_b:
        raise ValueError("distinguishing needs two different classes")
    _check_aux(d_aux, [class_a, class_b])
    gen = rng.generator()
    seeds = gen.integers(0, 2**63, size=2)
    r_a = verify(endpoint, d_aux, class_a, mark_a, mark_b, config, Rng(int(seeds[0])))
    r_b = verify(endpoint, d_aux, class_b, mark_b, mark_a, config, Rng(int(seeds[1])))
    return 1 if (r_a.verdict and r_b.verdict) else 0


def probe_candidate_label(endpoint, images: np.ndarray) -> tuple[int, float]:
    """Majority top-1 label over the user's clean images, with confidence.

    Raises :class:`LabelTieError` when two labels tie for the majority.
    """
    endpoint = as_endpoint(endpoint)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] < 1:
        raise ValueError("need at least one image")
    out = endpoint.query(images)
    if out.probs is not None:
        top1 = out.probs.argmax(axis=1)
    else:
        top1 = np.array([row[0][0] for row in out.topk], dtype=np.int64)
    counts = np.bincount(top1, minlength=endpoint.num_classes)
    best = counts.max()
    winners = np.nonzero(counts == best)[0]
    fraction = best / images.shape[0]
    if winners.size > 1:
        raise LabelTieError(winners.tolist(), fraction)
    return int(winners[0]), float(fraction)


# -- metrics harness -------------------------------------------------------


@dataclass(frozen=True)
class MarkTrial:
    """One planted mark plus the external control marks used to audit it."""

    mark: MarkSpec
    target_class: int
    externals: tuple[MarkSpec, ...]


@dataclass
class HarnessResult:
    """Detection/false-positive/distinguishing rates over a trial set."""

    true_positive_rate: float  # verdicts for (t, t') runs
    false_positive_rate: float  # verdicts with the mark order inverted
    distinguisher_rate: Optional[float]  # None with fewer than 2 marks
    verify_runs: int
    distinguish_runs: int
    query_count: int

    def csv_row(self, setting: str, accuracy: Optional[float] = None) -> dict:
        return {
            "setting": setting,
            "v_t": self.true_positive_rate,
            "v_f": self.false_positive_rate,
            "v_dt": "" if self.distinguisher_rate is None else self.distinguisher_rate,
            "accuracy": "" if accuracy is None else accuracy,
        }


def metrics_harness(
    endpoint,
    aux_pool: LabeledDataset,
    trials: Sequence[MarkTrial],
    config: VerifierConfig,
    rng: Rng,
    distinguish_cap: int = 25,
) -> HarnessResult:
    """Run the full verdict-rate table for a set of planted marks.

    The true-positive rate averages verify(t, t') over every trial and its
    externals; the false-positive rate inverts the order of the two marks.
    Distinguishing runs over all pairs of planted marks, randomly capped
    at ``distinguish_cap`` marks to bound the quadratic cost.
    """
    if not trials:
        raise ValueError("need at least one trial")
    endpoint = as_endpoint(endpoint)
    gen = rng.generator()
    tp_hits = 0
    fp_hits = 0
    runs = 0
    queries = 0
    for trial in trials:
        d_aux = aux_pool.without_class(trial.target_class)
        for external in trial.externals:
            seeds = gen.integers(0, 2**63, size=2)
            fwd = verify(
                endpoint, d_aux, trial.target_class, trial.mark, external,
                config, Rng(int(seeds[0])),
            )
            rev = verify(
                endpoint, d_aux, trial.target_class, external, trial.mark,
                config, Rng(int(seeds[1])),
            )
            tp_hits += fwd.verdict
            fp_hits += rev.verdict
            queries += fwd.query_count + rev.query_count
            runs += 1

    d_rate: Optional[float] = None
    d_runs = 0
    if len(trials) >= 2:
        pool = list(trials)
        if len(pool) > distinguish_cap:
            keep = gen.choice(len(pool), size=distinguish_cap, replace=False)
            pool = [pool[int(i)] for i in np.sort(keep)]
        hits = 0
        for a in range(len(pool)):
            for b in range(a + 1, len(pool)):
                ta, tb = pool[a], pool[b]
                d_aux = aux_pool.subset(
                    np.nonzero(
                        (aux_pool.labels != ta.target_class)
                        & (aux_pool.labels != tb.target_class)
                    )[0]
                )
                hits += distinguish(
                    endpoint, d_aux,
                    (ta.mark, ta.target_class), (tb.mark, tb.target_class),
                    config, Rng(int(gen.integers(0, 2**63))),
                )
                d_runs += 1
                queries += 2 * config.rounds * 2 * config.sample_size
        d_rate = hits / d_runs
    return HarnessResult(
        true_positive_rate=tp_hits / runs,
        false_positive_rate=fp_hits / runs,
        distinguisher_rate=d_rate,
        verify_runs=runs,
        distinguish_runs=d_runs,
        query_count=queries,
    )
