"""Kernel backend selection.

The compiled Cython core (twotower._kernels) and the pure numpy fallback
(twotower._kernels_py) implement the same two reductions with a pinned
floating-point evaluation order, so they are bitwise interchangeable; the
compiled one is just faster. Selection happens once at import:

  * TWOTOWER_KERNELS=python forces the fallback (used by the benchmark and
    the cross-backend equivalence test);
  * otherwise the compiled core is used when the import succeeds.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

if os.environ.get("TWOTOWER_KERNELS") == "python" or _compiled is None:
    _active = _kernels_py
    COMPILED = False
else:
    _active = _compiled
    COMPILED = True

matmul = _active.matmul
row_sum = _active.row_sum


def backend_name() -> str:
    return "compiled" if COMPILED else "python"
