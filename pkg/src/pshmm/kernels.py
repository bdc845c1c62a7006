"""Backend selection for the forward-recursion hot loop.

The compiled extension (``pshmm._fwdc``) is preferred; the pure-numpy
implementation (``pshmm._fwdpy``) is used when the extension was not built or
when ``PSHMM_PURE_PYTHON=1`` is set.  ``benchmarks/bench_forward.py`` compares
the two.
"""

import os

from . import _fwdpy

if os.environ.get("PSHMM_PURE_PYTHON") == "1":
    _impl = _fwdpy
    BACKEND = "python"
else:
    try:
        from . import _fwdc as _impl  # type: ignore[no-redef]

        BACKEND = "c"
    except ImportError:
        _impl = _fwdpy
        BACKEND = "python"


def forward(P, Gam, delta):
    return _impl.forward(P, Gam, delta)


def backward(P, Gam, delta, phi, c):
    return _impl.backward(P, Gam, delta, phi, c)
