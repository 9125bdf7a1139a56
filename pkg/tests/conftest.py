from pathlib import Path

import numpy as np
import pytest

from plategm.io.data import DataTable
from plategm.model import bind_data, load_model, simulate_data

MODELS = Path(__file__).resolve().parents[1] / "src" / "plategm" / "models"


def model_path(name: str) -> Path:
    return MODELS / f"{name}.gm"


def load(name: str):
    return load_model(model_path(name).read_text())


def simulated(name: str, n: int, seed: int = 0, values=None):
    """Bound model with ``n`` simulated cases, plus the generating state."""
    m = load(name)
    table, state = simulate_data(m, n, np.random.default_rng(seed), values=values)
    return bind_data(m, table), state


def table(**cols) -> DataTable:
    return DataTable.from_columns(cols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
