import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import load, model_path, simulated
from plategm.estimators import (
    ConjugateModel,
    EMEstimator,
    GibbsSampler,
    StructureSearch,
    check_data,
    check_model,
)
from plategm.io.data import DataError, DataTable

HEADS = {"heads": [1, 1, 1, 0, 0]}


@pytest.mark.parametrize("source", ["path", "pathobj", "text", "model"])
def test_check_model_variants(source):
    p = model_path("coin")
    arg = {"path": str(p), "pathobj": p, "text": p.read_text(), "model": load("coin")}[source]
    assert check_model(arg).node("theta") is not None


def test_check_model_rejects_other_types():
    with pytest.raises(TypeError):
        check_model(3)


def test_check_data_variants(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("a,b\n1,?\n2,3\n")
    from_csv = check_data(csv)
    from_dict = check_data({"a": [1, 2], "b": ["?", 3]})
    from_arr = check_data(np.array([[1, np.nan], [2, 3]]), columns=["a", "b"])
    for t in (from_csv, from_dict, from_arr):
        assert isinstance(t, DataTable)
        assert t.columns == ("a", "b")
        np.testing.assert_array_equal(t.mask, [[False, True], [False, False]])
    assert check_data(from_csv) is from_csv


def test_check_data_frame_like():
    class Col:
        def __init__(self, v):
            self.v = np.asarray(v)

        def to_numpy(self):
            return self.v

    class Frame:
        columns = ["x"]

        def __getitem__(self, k):
            return Col([1.0, 2.0])

        def to_numpy(self):
            return np.array([[1.0], [2.0]])

    assert check_data(Frame()).n_rows == 2


@pytest.mark.parametrize("X,cols", [(np.zeros((2, 2, 2)), ["a", "b"]), (np.zeros((2, 2)), None), (np.zeros((2, 2)), ["a"])])
def test_check_data_errors(X, cols):
    with pytest.raises(DataError):
        check_data(X, columns=cols)


def test_conjugate_model_fit_and_score():
    est = ConjugateModel(model=str(model_path("coin"))).fit(HEADS)
    assert est.schema_ == "exact-exponential"
    assert est.log_evidence_ == pytest.approx(np.log(1 / 60))
    assert np.exp(est.score({"heads": [1]})) == pytest.approx(4 / 7)
    assert est.n_cases_ == 5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ConjugateModel(model=str(model_path("coin"))).score(HEADS)


def test_params_and_clone():
    est = GibbsSampler(model="coin.gm", iters=50, seed=3)
    params = est.get_params()
    assert params["iters"] == 50 and params["seed"] == 3
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(iters=10)
    assert est.iters == 10


def test_gibbs_sampler():
    est = GibbsSampler(model=str(model_path("coin")), iters=4000, burnin=100, seed=1).fit(HEADS)
    assert est.posterior_mean_["theta"] == pytest.approx(4 / 7, abs=0.02)
    assert len(est.trace_) == 3900


def test_em_estimator_predict():
    bm, truth = simulated("mixture", 150, seed=3, values={"mu": np.array([-2.0, 2.0]), "phi": np.array([0.4, 0.6])})
    t = bm.data
    est = EMEstimator(model=str(model_path("mixture")), restarts=2).fit(t.values, columns=t.columns)
    assert est.converged_
    proba = est.predict_proba(t)
    assert proba.shape == (150, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    agree = np.mean(est.predict(t) == truth["class"])
    assert agree > 0.9


def test_structure_search():
    bm, _ = simulated("four_var_family", 30, seed=2)
    est = StructureSearch(model=str(model_path("four_var_family")), iters=400, seed=1, enumerate=True).fit(bm.data)
    assert sum(est.frequencies_.values()) == pytest.approx(1.0)
    assert sum(est.posterior_.values()) == pytest.approx(1.0)
    query, _ = simulated("four_var_family", 2, seed=3)
    assert np.isfinite(est.score(query.data))
