"""Model language, CSV data and the command-line front end."""

from plategm.io.data import MISSING, DataError, DataTable, read_csv, write_csv
from plategm.io.dsl import ModelError, ModelSpec, parse_model, print_model

__all__ = [
    "MISSING",
    "DataError",
    "DataTable",
    "ModelError",
    "ModelSpec",
    "parse_model",
    "print_model",
    "read_csv",
    "write_csv",
]
