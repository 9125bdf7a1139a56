import io
import time

import numpy as np
import pytest

from conftest import load, simulated, table
from plategm.model import bind_data, load_model
from plategm.sampler.gibbs import (
    GibbsConfig,
    _Sampler,
    build_schedule,
    canonicalize_labels,
    effective_sample_size,
    full_conditional,
    gibbs_run,
    label_structure,
)

CHAIN = """
a ~ Multinomial([0.3, 0.7])
b ~ Table([a], [0.9, 0.1, 0.2, 0.8])
observe b from "b"
"""


@pytest.mark.parametrize(
    "iters,burnin,thin,chains",
    [(1000, 100, 3, 1), (50, 0, 1, 2), (10, 10, 1, 1), (101, None, 7, 3)],
)
def test_row_count(iters, burnin, thin, chains):
    bm, _ = simulated("coin", 10)
    cfg = GibbsConfig(iters, burnin, thin, chains)
    tr = gibbs_run(bm, cfg)
    burn = iters // 10 if burnin is None else burnin
    assert len(tr) == chains * ((iters - burn) // thin) == chains * cfg.n_rows
    first = tr.chain(0).column("iteration")
    if len(first):
        assert first[0] == burn + thin


@pytest.mark.parametrize("kw", [{"iters": -1}, {"thin": 0}, {"chains": 0}, {"iters": 5, "burnin": 6}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        GibbsConfig(**kw)


def test_same_seed_same_trace():
    bm, _ = simulated("mixture", 30, seed=2)
    a = gibbs_run(bm, GibbsConfig(60, 10, seed=5, chains=2))
    b = gibbs_run(bm, GibbsConfig(60, 10, seed=5, chains=2))
    c = gibbs_run(bm, GibbsConfig(60, 10, seed=6, chains=2))
    np.testing.assert_array_equal(a.rows, b.rows)
    assert not np.array_equal(a.rows, c.rows)
    assert not np.array_equal(a.chain(0).rows[:, :-2], a.chain(1).rows[:, :-2])


def test_two_node_conditional_is_exact():
    bm = bind_data(load_model(CHAIN), table(b=[1]))
    p = full_conditional(bm, bm.initial_state(np.random.default_rng(0)), "a")
    joint = np.array([0.3 * 0.1, 0.7 * 0.8])
    np.testing.assert_allclose(p, joint / joint.sum(), atol=1e-14)
    tr = gibbs_run(bm, GibbsConfig(20_000, 0, seed=3))
    assert tr.column("a").mean() == pytest.approx(joint[1] / joint.sum(), abs=0.01)


def test_coin_posterior_moments():
    bm = bind_data(load("coin"), table(heads=[1, 1, 1, 0, 0]))
    tr = gibbs_run(bm, GibbsConfig(8000, 100, seed=1))
    th = tr.column("theta")
    assert th.mean() == pytest.approx(4 / 7, abs=0.01)
    assert th.var() == pytest.approx(4 * 3 / (7**2 * 8), abs=0.003)


def test_schedule_methods():
    bm, _ = simulated("mixture", 20)
    sched = [(u.target, u.method) for u in build_schedule(bm).updates]
    assert ("class", "enumerate-discrete") in sched
    assert any(m == "conjugate-draw" for _, m in sched)


def test_hetero_uses_conditional_conjugacy():
    bm, truth = simulated("hetero", 300, seed=3, values={"wmu": np.array([1.0, 2.0]), "wsig": np.array([-1.0, 0.5])})
    tr = gibbs_run(bm, GibbsConfig(1500, 500, seed=2))
    assert ("wmu", "conjugate-draw") in tr.meta["schedule"]
    assert ("wsig", "clique-ratio") in tr.meta["schedule"]
    est = np.array([tr.column("wmu[0]").mean(), tr.column("wmu[1]").mean()])
    np.testing.assert_allclose(est, [1.0, 2.0], atol=0.15)
    sig = np.array([tr.column("wsig[0]").mean(), tr.column("wsig[1]").mean()])
    np.testing.assert_allclose(sig, [-1.0, 0.5], atol=0.2)


def test_canonicalize_labels_orders_means():
    bm, _ = simulated("mixture", 10)
    st = bm.initial_state(np.random.default_rng(0))
    st["mu"] = np.array([3.0, -1.0])
    st["phi"] = np.array([0.2, 0.8])
    st["class"] = np.array([0.0, 1.0] * 5)
    out, perm = canonicalize_labels(bm, st)
    np.testing.assert_array_equal(perm, [1, 0])
    np.testing.assert_array_equal(out["mu"], [-1.0, 3.0])
    np.testing.assert_array_equal(out["phi"], [0.8, 0.2])
    np.testing.assert_array_equal(out["class"], [1.0, 0.0] * 5)
    assert label_structure(simulated("coin", 3)[0]) is None


def test_mixture_recovers_separated_means():
    bm, _ = simulated("mixture", 200, seed=3, values={"mu": np.array([-2.0, 2.0]), "phi": np.array([0.4, 0.6])})
    tr = gibbs_run(bm, GibbsConfig(600, 100, seed=0))
    assert tr.column("mu[0]").mean() == pytest.approx(-2.0, abs=0.3)
    assert tr.column("mu[1]").mean() == pytest.approx(2.0, abs=0.3)
    assert tr.column("phi[1]").mean() == pytest.approx(0.6, abs=0.1)


def test_missing_cells_are_imputed():
    bm, _ = simulated("regression", 40, seed=1)
    t = bm.data
    vals, mask = t.values.copy(), t.mask.copy()
    mask[:5, t.columns.index("y")] = True
    vals[mask] = np.nan
    from plategm.io.data import DataTable

    bm2 = bind_data(bm.model, DataTable(t.columns, vals, mask))
    tr = gibbs_run(bm2, GibbsConfig(200, 20, seed=1))
    assert np.all(np.isfinite(tr.rows))


def test_ess_of_white_noise_and_ar1(rng):
    x = rng.standard_normal(20_000)
    assert effective_sample_size(x) == pytest.approx(20_000, rel=0.1)
    rho = 0.8
    y = np.empty(50_000)
    y[0] = 0
    e = rng.standard_normal(y.size)
    for t in range(1, y.size):
        y[t] = rho * y[t - 1] + e[t]
    assert effective_sample_size(y) == pytest.approx(y.size * (1 - rho) / (1 + rho), rel=0.2)
    assert effective_sample_size(np.ones(10)) == 10


def test_trace_csv_stream():
    bm, _ = simulated("coin", 5)
    tr = gibbs_run(bm, GibbsConfig(10, 0))
    buf = io.StringIO()
    tr.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "theta,logjoint,chain,iteration"
    assert len(lines) == 11
    assert lines[1].endswith(",0,1")


def test_sweep_time_is_linear():
    times = []
    sizes = [10_000, 100_000]
    for n in sizes:
        bm, _ = simulated("mixture", n, seed=1)
        rng = np.random.default_rng(0)
        st = bm.initial_state(rng)
        s = _Sampler(bm, build_schedule(bm), rng)
        s.sweep(st)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            s.sweep(st)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.log(times[1] / times[0]) / np.log(sizes[1] / sizes[0])
    assert 0.5 <= slope <= 1.5
