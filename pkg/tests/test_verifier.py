import math

import numpy as np
import pytest

from isotope.imgdata import Rng
from isotope.marks import make_mark
from isotope.model import QueryOutput, wrap_topk
from isotope.verifier import (
    AuditReport,
    EndpointRoundError,
    LabelTieError,
    MarkTrial,
    VerifierConfig,
    distinguish,
    metrics_harness,
    probe_candidate_label,
    verify,
)

from conftest import (
    TINY_CLASSES,
    TINY_DIMS,
    ConstantEndpoint,
    NoiseEndpoint,
    PlantedResponder,
    bright_aux,
)


def pixel_mark(top, left, mark_id, alpha=0.4, size=3):
    return make_mark("pixel_square", TINY_DIMS, Rng(1), alpha=alpha,
                     square_size=size, top=top, left=left, mark_id=mark_id)


TRUE_MARK = pixel_mark(0, 0, "true")
EXT_MARK = pixel_mark(10, 10, "ext")
SECOND_MARK = pixel_mark(5, 5, "second")
TARGET = 2
SECOND_TARGET = 4

CFG = VerifierConfig(significance=0.1, positive_fraction=0.6, rounds=5, sample_size=40)


def planted():
    return PlantedResponder(TINY_CLASSES, [(TRUE_MARK, TARGET)])


def aux(exclude=(TARGET,), n=220, seed=40):
    return bright_aux(TINY_CLASSES, n, seed=seed, exclude=tuple(exclude))


# -- verify --------------------------------------------------------------------


def test_mark_blind_endpoint_gives_verdict_zero(constant_endpoint):
    report = verify(constant_endpoint, aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    assert report.verdict == 0
    assert report.positives == 0
    assert all(p == 1.0 for p in report.p_values)
    assert all(r.degenerate for r in report.test_results)


def test_planted_responder_detected():
    report = verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    assert report.verdict == 1
    assert report.positives == 5
    assert all(p < 1e-4 for p in report.p_values)


def test_swapped_marks_give_verdict_zero():
    report = verify(planted(), aux(), TARGET, EXT_MARK, TRUE_MARK, CFG, Rng(7))
    assert report.verdict == 0


def test_query_budget_exact(constant_endpoint):
    report = verify(constant_endpoint, aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    expected = 2 * CFG.sample_size * CFG.rounds
    assert report.query_count == expected
    assert constant_endpoint.images_seen == expected


def test_aux_with_target_class_rejected():
    polluted = bright_aux(TINY_CLASSES, 60, exclude=())
    with pytest.raises(ValueError, match="must not contain"):
        verify(planted(), polluted, TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))


def test_identical_marks_rejected():
    with pytest.raises(ValueError, match="must differ"):
        verify(planted(), aux(), TARGET, TRUE_MARK, TRUE_MARK, CFG, Rng(7))
    clone = pixel_mark(0, 0, "true-clone")
    with pytest.raises(ValueError, match="must differ"):
        verify(planted(), aux(), TARGET, TRUE_MARK, clone, CFG, Rng(7))


def test_aux_smaller_than_round_rejected():
    small = aux(n=CFG.sample_size - 1)
    with pytest.raises(ValueError, match="round needs"):
        verify(planted(), small, TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))


def test_mode_endpoint_mismatch():
    rank_cfg = VerifierConfig(mode="rank", sample_size=40)
    with pytest.raises(ValueError, match="needs a topk endpoint"):
        verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, rank_cfg, Rng(7))
    topk_ep = wrap_topk(planted(), 3)
    with pytest.raises(ValueError, match="needs a probs endpoint"):
        verify(topk_ep, aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))


def test_rank_mode_detects_planted_mark():
    # rank shifts need the planted response to actually reorder the top-K
    strong = PlantedResponder(TINY_CLASSES, [(TRUE_MARK, TARGET)], boost=0.4)
    topk_ep = wrap_topk(strong, 3)
    cfg = VerifierConfig(mode="rank", sample_size=60)
    report = verify(topk_ep, aux(), TARGET, TRUE_MARK, EXT_MARK, cfg, Rng(7))
    assert report.verdict == 1
    swapped = verify(topk_ep, aux(), TARGET, EXT_MARK, TRUE_MARK, cfg, Rng(7))
    assert swapped.verdict == 0


def test_unpaired_mode_detects_planted_mark():
    cfg = VerifierConfig(mode="unpaired", sample_size=60)
    report = verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, cfg, Rng(7))
    assert report.verdict == 1
    assert report.query_count == 2 * 60 * cfg.rounds


def test_unpaired_needs_twice_the_images():
    cfg = VerifierConfig(mode="unpaired", sample_size=60)
    with pytest.raises(ValueError, match="round needs 120"):
        verify(planted(), aux(n=100), TARGET, TRUE_MARK, EXT_MARK, cfg, Rng(7))


class FlakyEndpoint(ConstantEndpoint):
    def __init__(self, fail_on_call: int):
        super().__init__(TINY_CLASSES)
        self.fail_on_call = fail_on_call

    def query(self, images):
        if self.calls == self.fail_on_call:
            raise ConnectionError("server went away")
        return super().query(images)


def test_endpoint_failure_carries_round_index():
    endpoint = FlakyEndpoint(fail_on_call=4)  # fails during round 2
    with pytest.raises(EndpointRoundError) as err:
        verify(endpoint, aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    assert err.value.round_index == 2


def test_verify_deterministic_given_rng():
    a = verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    b = verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    assert a.p_values == b.p_values


def test_report_json_round_trip():
    import json

    report = verify(planted(), aux(), TARGET, TRUE_MARK, EXT_MARK, CFG, Rng(7))
    doc = json.loads(report.to_json())
    assert doc["verdict"] == report.verdict
    assert doc["config"]["rounds"] == 5
    assert len(doc["p_values"]) == 5


# -- verdicts ------------------------------------------------------------------


def test_verdict_threshold_strictness():
    cfg = VerifierConfig(significance=0.1, positive_fraction=0.6, rounds=5,
                         sample_size=40)
    report = AuditReport(
        p_values=[0.01, 0.01, 0.01, 0.5, 0.5], positives=3, verdict=0, config=cfg,
        query_count=0, class_index=0, mark_id="a", external_id="b",
    )
    # 3/5 = 0.6 is NOT > 0.6: verdict stays 0
    assert report.verdict_at() == 0
    assert report.verdict_at(positive_fraction=0.59) == 1


def test_lowering_lambda_never_flips_to_positive():
    gen = np.random.Generator(np.random.PCG64(5))
    cfg = VerifierConfig(rounds=7, sample_size=40)
    for _ in range(200):
        pvals = list(gen.uniform(0, 1, size=7))
        report = AuditReport(
            p_values=pvals, positives=0, verdict=0, config=cfg, query_count=0,
            class_index=0, mark_id="a", external_id="b",
        )
        lam = 0.2
        for lam_lower in (0.15, 0.1, 0.05, 0.01):
            assert report.verdict_at(significance=lam_lower) <= report.verdict_at(
                significance=lam
            )
            lam = lam_lower


def test_boosted_fpr_bound_analytic():
    # P(Binomial(5, 0.1) >= 4), the chance of a false boosted verdict when
    # per-round positives are independent with probability lambda
    lam, q = 0.1, 5
    p4 = math.comb(q, 4) * lam**4 * (1 - lam)
    p5 = lam**5
    assert p4 + p5 == pytest.approx(4.6e-4, rel=1e-10)


# -- distinguish -----------------------------------------------------------------


def both_planted():
    return PlantedResponder(
        TINY_CLASSES, [(TRUE_MARK, TARGET), (SECOND_MARK, SECOND_TARGET)]
    )


def test_distinguish_two_planted_marks():
    d_aux = aux(exclude=(TARGET, SECOND_TARGET))
    result = distinguish(
        both_planted(), d_aux, (TRUE_MARK, TARGET), (SECOND_MARK, SECOND_TARGET),
        CFG, Rng(7),
    )
    assert result == 1


def test_distinguish_symmetric_null_gives_zero():
    endpoint = ConstantEndpoint(TINY_CLASSES)
    d_aux = aux(exclude=(TARGET, SECOND_TARGET))
    result = distinguish(
        endpoint, d_aux, (TRUE_MARK, TARGET), (SECOND_MARK, SECOND_TARGET),
        CFG, Rng(7),
    )
    assert result == 0


def test_distinguish_wrong_pairing_gives_zero():
    d_aux = aux(exclude=(TARGET, SECOND_TARGET))
    result = distinguish(
        both_planted(), d_aux, (SECOND_MARK, TARGET), (TRUE_MARK, SECOND_TARGET),
        CFG, Rng(7),
    )
    assert result == 0


def test_distinguish_same_class_rejected():
    with pytest.raises(ValueError, match="different classes"):
        distinguish(both_planted(), aux(), (TRUE_MARK, TARGET),
                    (SECOND_MARK, TARGET), CFG, Rng(7))


# -- candidate label probing -------------------------------------------------------


class FixedTopEndpoint:
    mode = "probs"

    def __init__(self, num_classes, top_labels):
        self.num_classes = num_classes
        self.top_labels = top_labels

    def query(self, images):
        probs = np.full((images.shape[0], self.num_classes), 0.01)
        for i in range(images.shape[0]):
            probs[i, self.top_labels[i % len(self.top_labels)]] = 0.9
        return QueryOutput(probs=probs / probs.sum(axis=1, keepdims=True))


def test_probe_unanimous():
    endpoint = FixedTopEndpoint(TINY_CLASSES, [5])
    label, confidence = probe_candidate_label(endpoint, aux(n=10).images)
    assert label == 5 and confidence == 1.0


def test_probe_majority_fraction():
    endpoint = FixedTopEndpoint(TINY_CLASSES, [3, 3, 3, 1, 2])
    label, confidence = probe_candidate_label(endpoint, aux(n=10).images)
    assert label == 3
    assert confidence == pytest.approx(0.6)


def test_probe_tie_raises_with_candidates():
    endpoint = FixedTopEndpoint(TINY_CLASSES, [1, 4])
    with pytest.raises(LabelTieError) as err:
        probe_candidate_label(endpoint, aux(n=10).images)
    assert err.value.candidates == [1, 4]


# -- metrics harness ----------------------------------------------------------------


def test_metrics_harness_on_planted_pair():
    external_sets = [
        tuple(pixel_mark(0, 6 + 2 * e, f"extA{e}") for e in range(3)),
        tuple(pixel_mark(6 + 2 * e, 0, f"extB{e}") for e in range(3)),
    ]
    trials = [
        MarkTrial(mark=TRUE_MARK, target_class=TARGET, externals=external_sets[0]),
        MarkTrial(mark=SECOND_MARK, target_class=SECOND_TARGET,
                  externals=external_sets[1]),
    ]
    pool = bright_aux(TINY_CLASSES, 360, seed=41, exclude=())
    result = metrics_harness(both_planted(), pool, trials, CFG, Rng(11))
    assert result.true_positive_rate == 1.0
    assert result.false_positive_rate == 0.0
    assert result.distinguisher_rate == 1.0
    assert result.verify_runs == 6
    assert result.distinguish_runs == 1
    row = result.csv_row("two-marks", accuracy=0.97)
    assert row["v_t"] == 1.0 and row["accuracy"] == 0.97


def test_metrics_harness_null_rates_low():
    trials = [
        MarkTrial(mark=TRUE_MARK, target_class=TARGET,
                  externals=(EXT_MARK, pixel_mark(0, 6, "e2"))),
    ]
    pool = bright_aux(TINY_CLASSES, 360, seed=42, exclude=())
    result = metrics_harness(NoiseEndpoint(TINY_CLASSES, seed=3), pool, trials,
                             CFG, Rng(11))
    assert result.true_positive_rate == 0.0
    assert result.false_positive_rate == 0.0
    assert result.distinguisher_rate is None
