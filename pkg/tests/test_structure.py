import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import load, simulated, table
from plategm.decompose import factored_log_evidence
from plategm.io.data import DataTable
from plategm.model import bind_data
from plategm.sampler.structure import (
    StructureConfig,
    complete_data,
    enumerate_posterior,
    model_average_predict,
    model_prior,
    predictive_logpdf,
    structure_mcmc,
)


def test_model_prior_normalised():
    n = 4
    total = logsumexp([model_prior(b, n, 0.3) for b in range(1 << n)])
    assert total == pytest.approx(0.0, abs=1e-12)
    assert model_prior(0b1111, 4, 0.5) == pytest.approx(4 * np.log(0.5))


def test_enumerate_sums_to_one():
    bm, _ = simulated("four_var_family", 30, seed=2)
    post = enumerate_posterior(bm)
    assert sum(post.values()) == pytest.approx(1.0, abs=1e-12)
    assert len(post) == 16


def test_arc_prior_shifts_posterior():
    bm, _ = simulated("four_var_family", 10, seed=2)
    sparse = enumerate_posterior(bm, 0.1)
    dense = enumerate_posterior(bm, 0.9)
    assert sparse[0] > dense[0]
    assert dense[15] > sparse[15]


@pytest.mark.parametrize("kw", [{"arc_prior": 0.0}, {"arc_prior": 1.0}, {"iters": 5, "burnin": 6}, {"thin": 0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        StructureConfig(**kw)


def test_trace_layout_and_reproducibility():
    bm, _ = simulated("four_var_family", 20, seed=1)
    cfg = StructureConfig(iters=300, burnin=50, thin=5, chains=2, seed=3)
    a = structure_mcmc(bm, cfg)
    b = structure_mcmc(bm, cfg)
    np.testing.assert_array_equal(a.rows, b.rows)
    assert a.columns == ["model-id", "logjoint", "chain", "iteration"]
    assert len(a) == 2 * 50
    assert a.meta["proposed"] == 600
    assert 0 <= a.meta["accepted"] <= 600


def test_logjoint_column_matches_member_evidence():
    bm, _ = simulated("four_var_family", 20, seed=1)
    tr = structure_mcmc(bm, StructureConfig(iters=40, burnin=0, seed=2))
    for bits, lj in zip(tr.column("model-id")[:10].astype(int), tr.column("logjoint")[:10]):
        expect = factored_log_evidence(bm.instantiate(bits))[1] + model_prior(bits, 4, 0.5)
        assert lj == pytest.approx(expect, abs=1e-9)


@pytest.mark.parametrize("order", ["before", "after"])
def test_missing_cells_resampled(order):
    bm, _ = simulated("four_var_family", 25, seed=4)
    t = bm.data
    vals, mask = t.values.copy(), t.mask.copy()
    mask[::5, t.columns.index("var2")] = True
    vals[mask] = np.nan
    bm2 = bind_data(bm.model, DataTable(t.columns, vals, mask))
    tr = structure_mcmc(bm2, StructureConfig(iters=60, burnin=0, seed=1, resample=order))
    assert len(tr) == 60
    assert tr.meta["factor_evaluations"] is not None


def test_complete_data_fills_missing():
    bm, _ = simulated("regression", 6, seed=1)
    t = bm.data
    vals, mask = t.values.copy(), t.mask.copy()
    mask[0, 1] = True
    vals[mask] = np.nan
    bm2 = bind_data(bm.model, DataTable(t.columns, vals, mask))
    st = bm2.initial_state(np.random.default_rng(0))
    done = complete_data(bm2, st)
    assert not done.missing["y"].any()
    assert done.observed["y"][0] == st["y"][0]


def test_coin_predictive():
    bm = bind_data(load("coin"), table(heads=[1, 1, 1, 0, 0]))
    assert np.exp(predictive_logpdf(bm, table(heads=[1]))) == pytest.approx(4 / 7)
    two = predictive_logpdf(bm, table(heads=[1, 0]))
    assert np.exp(two) == pytest.approx(4 / 7 * 3 / 8)


def test_predictive_needs_columns():
    bm = bind_data(load("coin"), table(heads=[1, 0]))
    with pytest.raises(ValueError):
        predictive_logpdf(bm, table(tails=[1]))


def test_model_average_predict_is_mixture_of_members():
    bm, _ = simulated("four_var_family", 25, seed=8)
    query, _ = simulated("four_var_family", 1, seed=9)
    out = model_average_predict(bm, query.data)
    w = out["weights"]
    direct = np.log(sum(w[b] * np.exp(out["per_model"][b]) for b in w))
    assert out["log_density"] == pytest.approx(direct, abs=1e-10)
    one = model_average_predict(bm, query.data, weights={5: 1.0})
    assert one["log_density"] == pytest.approx(predictive_logpdf(bm.instantiate(5), query.data))
    with pytest.raises(ValueError):
        model_average_predict(bm, query.data, weights={5: 0.0})


def test_invalid_resample_order():
    with pytest.raises(ValueError):
        StructureConfig(resample="during")
