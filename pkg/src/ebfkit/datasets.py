"""Bundled data: the 56-district Scottish lip-cancer counts.

Columns: county (1..56), observed and expected case counts, and
log_expected (the Poisson offset).  The companion adjacency file is the
classic map variant in which the island districts are linked by their ferry
routes, so every district has at least one neighbour (129 edges).  Row j of
the CSV corresponds to node j of the adjacency.
"""

from __future__ import annotations

from importlib import resources

from .covstruct import Adjacency
from .model import read_csv


def _data_path(name):
    return resources.files("ebfkit").joinpath("data").joinpath(name)


def scotland_csv_path():
    return str(_data_path("scotland.csv"))


def scotland_adjacency_path():
    return str(_data_path("scotland.adj"))


def load_scotland():
    """(Dataset, Adjacency) for the lip-cancer example."""
    return read_csv(scotland_csv_path()), Adjacency.from_file(scotland_adjacency_path())
