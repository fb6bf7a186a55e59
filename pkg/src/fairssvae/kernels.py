"""Backend selection for the fairness-metric kernels.

The compiled Cython module is used when it imports; otherwise (or when the
environment variable ``FAIRSSVAE_PURE_PYTHON`` is set to a non-empty value)
the numpy implementation is used.  Both expose ``metric_rows`` and
``mc_rows`` with identical semantics.
"""
import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

try:
    from . import _ckernels as compiled_backend  # noqa: F401
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and not os.environ.get("FAIRSSVAE_PURE_PYTHON"):
    _active = compiled_backend
    BACKEND = "cython"
else:
    _active = _pykernels
    BACKEND = "python"

metric_rows = _active.metric_rows
mc_rows = _active.mc_rows


def available_backends():
    out = {"python": _pykernels}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
