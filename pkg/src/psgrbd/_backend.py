"""Select the compiled kernels when available, else the numpy fallback.

Set ``PSGRBD_BACKEND=python`` to force the fallback (used by the benchmark
and the backend-equivalence tests).
"""

import os

from . import _fallback

BACKEND = "python"
kernels = _fallback

if os.environ.get("PSGRBD_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as kernels  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        kernels = _fallback

build_tree = kernels.build_tree
apply_forest = kernels.apply_forest
permutation_entropy_rows = kernels.permutation_entropy_rows
