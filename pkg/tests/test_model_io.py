import io

import numpy as np
import pytest

from conftest import load, simulated, table
from plategm.io.data import DataError, DataTable, read_csv, write_csv
from plategm.model import bind_data, load_model, simulate_data


def test_csv_round_trip(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, ["a", "b"], [[1, 2.5], [float("nan"), -3]])
    assert p.read_text() == "a,b\n1,2.5\n?,-3\n"
    t = read_csv(p)
    assert t.columns == ("a", "b")
    np.testing.assert_array_equal(t.mask, [[False, False], [True, False]])
    assert t.values[1, 1] == -3


def test_custom_missing_token():
    t = read_csv(io.StringIO("x\nNA\n4\n"), missing="NA")
    assert t.mask[:, 0].tolist() == [True, False]


@pytest.mark.parametrize(
    "text,fragment",
    [("", "empty"), ("a,\n1,2\n", "empty column"), ("a,b\n1\n", "row 2"), ("a\nfoo\n", "cannot parse"), ("a\ninf\n", "non-finite")],
)
def test_csv_errors(text, fragment):
    with pytest.raises(DataError, match=fragment):
        read_csv(io.StringIO(text))


def test_duplicate_columns():
    with pytest.raises(DataError):
        DataTable(("a", "a"), np.zeros((1, 2)), np.zeros((1, 2), bool))


def test_from_columns_length_mismatch():
    with pytest.raises(DataError):
        DataTable.from_columns({"a": [1, 2], "b": [1]})


@pytest.mark.parametrize("name", ["coin", "mixture", "regression", "m1", "grid", "hetero", "ffnet", "discrete_mixture"])
def test_simulate_then_bind(name):
    bm, state = simulated(name, 17, seed=3)
    assert bm.data.n_rows == 17
    for node in bm.observed:
        np.testing.assert_allclose(bm.observed[node], state[node])
        assert not bm.missing[node].any()


def test_simulate_respects_fixed_values():
    m = load("coin")
    t, state = simulate_data(m, 2000, np.random.default_rng(1), values={"theta": 0.8})
    assert float(state["theta"]) == 0.8
    assert t.column("heads")[0].mean() == pytest.approx(0.8, abs=0.03)


def test_missing_cells_become_unknowns():
    bm = bind_data(load("coin"), table(heads=[1, None, 0]))
    assert bm.missing["heads"].tolist() == [False, True, False]
    assert "heads" in bm.unknowns
    st = bm.initial_state(np.random.default_rng(0))
    assert st["heads"][1] in (0.0, 1.0)


def test_missing_column():
    with pytest.raises(DataError, match="heads"):
        bind_data(load("coin"), table(tails=[1]))


def test_out_of_support_value_names_row():
    with pytest.raises(DataError, match="row 2"):
        bind_data(load("coin"), table(heads=[1, 3]))


def test_instantiate_fixes_family_member():
    fam = load("four_var_family")
    assert fam.full_bits == 0b1111
    m = fam.instantiate(0)
    assert not {a.endpoints for a in m.graph.arcs} & set(fam.graph.optional_order)


def test_plate_size_from_rows():
    bm, _ = simulated("mixture", 9)
    assert bm.plate_size("i") == 9
    assert bm.plate_size("k") == 2
    assert bm.full_shape("mu") == (2,)


def test_model_error_is_value_error():
    with pytest.raises(ValueError):
        load_model("x ~ Nope(1)\n")
