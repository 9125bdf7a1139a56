import numpy as np
import pytest
from scipy import stats

from conftest import load, simulated, table
from plategm.autodiff import (
    EnumerationError,
    exponential_form_grad,
    finite_diff_check,
    island_jacobian,
    islands,
    log_joint_grad,
    log_marginal,
    log_marginal_grad,
    responsibilities,
)
from plategm.model import bind_data
from plategm.semantics import log_joint

AGE = np.array([0.176, 0.649, 0.175])
OCC = np.array([0.632, 0.368])
CLIM = np.array([0.750, 0.250])
DIS = np.array(
    [0.919, 0.081, 0.176, 0.824, 0.682, 0.318, 0.544, 0.456, 0.493, 0.507, 0.516, 0.484,
     0.529, 0.471, 0.364, 0.636, 0.361, 0.639, 0.613, 0.387, 0.592, 0.408, 0.905, 0.095]
).reshape(3, 2, 2, 2)
SYMP = np.array([0.552, 0.368, 0.080, 0.448, 0.143, 0.409]).reshape(2, 3)


def _state(bm, seed=0):
    return bm.initial_state(np.random.default_rng(seed))


def _continuous(bm):
    return [p for p in bm.parameters if not bm.node(p).domain.is_discrete]


@pytest.mark.parametrize("name", ["hetero", "ffnet", "regression", "m1"])
def test_log_joint_grad_matches_finite_differences(name):
    bm, _ = simulated(name, 15, seed=1)
    state = _state(bm)
    targets = _continuous(bm)
    g = log_joint_grad(bm, state, targets)
    rep = finite_diff_check(lambda s: log_joint(bm, s), g, state, targets)
    assert max(v[0] for v in rep.values()) <= 1e-6


@pytest.mark.parametrize("name", ["hetero", "ffnet"])
def test_island_method_matches_inline(name):
    bm, _ = simulated(name, 12, seed=2)
    state = _state(bm, 3)
    a = log_joint_grad(bm, state, method="inline")
    b = log_joint_grad(bm, state, method="islands")
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-10, atol=1e-12)


def test_forward_and_backward_jacobians_agree():
    bm, _ = simulated("ffnet", 4, seed=5)
    state = _state(bm, 1)
    isl = islands(bm)
    assert isl
    for island in isl:
        fwd = island_jacobian(bm, state, island, "forward")
        bwd = island_jacobian(bm, state, island, "backward")
        assert fwd.keys() == bwd.keys()
        for k in fwd:
            np.testing.assert_allclose(fwd[k], bwd[k], rtol=1e-10, atol=1e-12)


def test_ffnet_island_boundary():
    bm, _ = simulated("ffnet", 3)
    (island,) = islands(bm)
    assert set(island.outputs) == {"m1", "m2"}
    assert {"w1", "w2", "w3", "w4", "w5", "x1", "x2"} == set(island.inputs)


def test_island_jacobian_requires_inputs():
    bm, _ = simulated("ffnet", 3)
    state = _state(bm)
    state["w3"] = np.full_like(state["w3"], np.nan)
    with pytest.raises(ValueError):
        island_jacobian(bm, state, islands(bm)[0])


def test_gradient_of_observed_node_is_refused():
    bm, _ = simulated("coin", 5)
    with pytest.raises(ValueError):
        log_joint_grad(bm, _state(bm), ["heads"])


def test_mixture_log_marginal_oracle():
    bm, _ = simulated("mixture", 25, seed=4)
    state = _state(bm, 2)
    x = bm.observed["x"]
    phi, mu = state["phi"], state["mu"]
    lik = np.log(phi[0] * stats.norm.pdf(x, mu[0], 1) + phi[1] * stats.norm.pdf(x, mu[1], 1)).sum()
    prior = stats.dirichlet([2, 2]).logpdf(phi) + stats.norm.logpdf(mu, 0, 10).sum()
    assert log_marginal(bm, state) == pytest.approx(lik + prior, abs=1e-9)


def test_medical_log_marginal_is_symptom_probability():
    bm = bind_data(load("medical"), table(Symp=[2]))
    p = np.einsum("a,o,c,aocd,d->", AGE, OCC, CLIM, DIS, SYMP[:, 2])
    assert log_marginal(bm, bm.observed_state()) == pytest.approx(np.log(p), abs=1e-12)


def test_responsibilities_are_normalised():
    bm, _ = simulated("discrete_mixture", 30, seed=3)
    gw, cw, _ = responsibilities(bm, _state(bm))
    assert gw.sum() == pytest.approx(1.0)
    for c in cw:
        np.testing.assert_allclose(c.sum(axis=0), 1.0)


@pytest.mark.parametrize("name", ["mixture", "discrete_mixture"])
def test_log_marginal_grad_matches_finite_differences(name):
    bm, _ = simulated(name, 20, seed=6)
    state = _state(bm, 4)
    targets = list(bm.parameters)
    g = log_marginal_grad(bm, state, targets)
    rep = finite_diff_check(lambda s: log_marginal(bm, s), g, state, targets)
    assert max(v[0] for v in rep.values()) <= 1e-5


def test_exponential_form_matches_marginal_gradient():
    bm, _ = simulated("discrete_mixture", 30, seed=7)
    state = _state(bm, 5)
    g = log_marginal_grad(bm, state)
    beta = exponential_form_grad(bm, state, "theta1")
    np.testing.assert_allclose(beta.ravel(), g["theta1"].ravel(), rtol=1e-8, atol=1e-8)
    # Dirichlet: free coordinates are the first C-1 probabilities
    dirichlet = exponential_form_grad(bm, state, "phi").ravel()
    np.testing.assert_allclose(dirichlet, g["phi"][:-1] - g["phi"][-1], rtol=1e-8, atol=1e-8)


def test_exponential_form_rejects_gaussian_parameter():
    bm, _ = simulated("mixture", 5)
    with pytest.raises(ValueError):
        exponential_form_grad(bm, _state(bm), "mu")


def test_enumeration_limit(monkeypatch):
    import plategm.autodiff as ad

    monkeypatch.setattr(ad, "MAX_CONFIGS", 5)
    bm, _ = simulated("discrete_mixture", 5)
    with pytest.raises(EnumerationError):
        log_marginal(bm, _state(bm))


def test_finite_diff_relative_error_definition():
    state = {"a": np.array([2.0])}
    rep = finite_diff_check(lambda s: float(s["a"][0] ** 2), {"a": np.array([4.4])}, state)
    assert rep["a"][0] == pytest.approx(0.4 / 4.4, rel=1e-6)
