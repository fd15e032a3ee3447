"""Knowledge-tracing engine: recurrent user modeling with attention over
question-response histories, plus the training, evaluation, simulation,
and review-recommendation tooling around it.

Submodules are imported lazily on attribute access so the CLI can pin
BLAS thread counts before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("numerics", "model", "data", "training", "evaluation",
               "review", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
