import numpy as np
import pytest
from scipy import stats
from scipy.special import betaln

from conftest import load, simulated, table
from plategm.decompose import (
    EvidenceScorer,
    SchemaError,
    classify_schema,
    factored_log_evidence,
    finest_decomposition,
    incremental_update,
    log_bayes_factor,
    whole_model_log_evidence,
)
from plategm.model import bind_data


def test_coin_evidence_is_beta_binomial():
    bm = bind_data(load("coin"), table(heads=[1, 1, 1, 0, 0]))
    per, total = factored_log_evidence(bm)
    assert total == pytest.approx(betaln(4, 3) - betaln(1, 1), abs=1e-12)
    assert set(per) == {"theta", "known"}


def test_regression_evidence_is_student_t():
    x = np.array([0.3, -1.2, 0.8, 1.9, -0.4])
    y = np.array([1.5, -1.0, 2.1, 4.2, 0.3])
    bm = bind_data(load("regression"), table(x=x, y=y))
    design = np.column_stack([np.ones_like(x), x])
    # tau ~ Gamma(1, 1), w | tau ~ N(0, I / tau): y is Student-t with 2 dof
    scale = design @ design.T + np.eye(x.size)
    oracle = stats.multivariate_t(np.zeros(x.size), scale, df=2).logpdf(y) + stats.norm.logpdf(x).sum()
    assert factored_log_evidence(bm)[1] == pytest.approx(oracle, abs=1e-10)


@pytest.mark.parametrize("name", ["coin", "regression", "m1", "m2"])
def test_factored_equals_whole(name):
    bm, _ = simulated(name, 40, seed=2)
    assert factored_log_evidence(bm)[1] == pytest.approx(whole_model_log_evidence(bm), abs=1e-9)
    assert whole_model_log_evidence(bm, "mode") == pytest.approx(whole_model_log_evidence(bm), abs=1e-9)


def test_m1_m2_bayes_factor_is_one_factor():
    bm1, _ = simulated("m1", 60, seed=4)
    bm2 = bind_data(load("m2"), bm1.data)
    f1, _ = factored_log_evidence(bm1)
    f2, _ = factored_log_evidence(bm2)
    changed = [k for k in f1 if abs(f1[k] - f2[k]) > 1e-12]
    assert changed == ["mu1,tau1"]
    assert log_bayes_factor(bm2, bm1) == pytest.approx(f2["mu1,tau1"] - f1["mu1,tau1"], abs=1e-12)


def test_bayes_factor_needs_same_variables():
    with pytest.raises(ValueError):
        log_bayes_factor(simulated("coin", 5)[0], simulated("m1", 5)[0])


def test_incremental_matches_full_recomputation():
    bm, _ = simulated("four_var_family", 40, seed=6)
    scorer = EvidenceScorer(bm)
    fresh = EvidenceScorer(bm)
    n = len(scorer.arcs)
    for bits in range(1 << n):
        cur = scorer.score(bits)
        for i, arc in enumerate(scorer.arcs):
            new, label = incremental_update(scorer, cur, arc)
            full = fresh.score(new.bits)
            for k in full.factors:
                assert new.factors[k] == pytest.approx(full.factors[k], abs=1e-12)
            assert [k for k in cur.factors if cur.factors[k] != new.factors[k]] in ([], [label])


def test_incremental_rejects_unknown_arc():
    bm, _ = simulated("four_var_family", 10)
    scorer = EvidenceScorer(bm)
    with pytest.raises(ValueError):
        incremental_update(scorer, scorer.score(0), ("x2", "x1"))


def test_family_members_match_direct_binding():
    fam, _ = simulated("four_var_family", 30, seed=1)
    scorer = EvidenceScorer(fam)
    for bits in (0, 5, 15):
        assert scorer.score(bits).total == pytest.approx(factored_log_evidence(fam.instantiate(bits))[1], abs=1e-10)


def test_mixture_decomposition_keeps_latent_with_parameters():
    bm, _ = simulated("mixture", 30)
    dec = finest_decomposition(bm)
    assert len(dec.labels) == 1
    assert {"mu", "phi"} <= set(dec.subproblems[0].unknowns)


@pytest.mark.parametrize(
    "name,label",
    [
        ("coin", "exact-exponential"),
        ("regression", "exact-exponential"),
        ("m1", "exact-exponential"),
        ("m2", "exact-exponential"),
        ("four_var_family", "exact-exponential"),
        ("mixture", "mixture"),
        ("discrete_mixture", "mixture"),
        ("hetero", "partial-exponential"),
        ("ffnet", "unsupported"),
        ("grid", "unsupported"),
    ],
)
def test_schema_labels(name, label):
    bm, _ = simulated(name, 20, seed=3)
    sc = classify_schema(bm)
    assert sc.label == label
    assert sc.trace


def test_medical_with_missing_cells_is_mixture():
    bm = bind_data(load("medical"), table(Symp=[2]))
    assert classify_schema(bm).label == "mixture"


def test_hetero_fixes_the_scale_weights():
    bm, _ = simulated("hetero", 20)
    sc = classify_schema(bm)
    assert sc.fixed == ("wsig",)
    assert sc.groups["wmu"] == "partial-exponential"


@pytest.mark.parametrize("name", ["mixture", "hetero", "ffnet"])
def test_exact_evidence_refused(name):
    bm, _ = simulated(name, 10)
    with pytest.raises(SchemaError):
        factored_log_evidence(bm)
