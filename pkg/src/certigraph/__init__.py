"""Certifiably optimal factor-graph estimation via low-rank semidefinite relaxation.

Submodules are imported lazily so lightweight entry points (the CLI in
particular) can configure the process environment before the numeric stack
loads.
"""
from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "manifolds",
    "graph",
    "objective",
    "optimizer",
    "certifier",
    "staircase",
    "dataset_io",
    "synthetic",
    "report",
    "cli",
)


def __getattr__(name: str):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
