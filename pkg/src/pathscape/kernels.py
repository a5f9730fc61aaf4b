"""Backend selection for the hot kernels.

The compiled extension is used when it was built and ``PATHSCAPE_PURE_PYTHON`` is
unset; otherwise the numpy fallback is used. Both expose ``enumerate_chain`` and
``scatter_add`` with identical semantics.
"""

from __future__ import annotations

import os

from pathscape import _kernels_py

try:
    if os.environ.get("PATHSCAPE_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced")
    from pathscape import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if _compiled is not None else "python"
_impl = BACKENDS[BACKEND]

enumerate_chain = _impl.enumerate_chain
scatter_add = _impl.scatter_add
