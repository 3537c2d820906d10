"""Hot numeric kernels, compiled when available.

The Cython extension ``spar._kernels`` is used if it was built; otherwise
the numpy/scipy implementations in ``spar._kernels_py`` are used. Set
``SPAR_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("SPAR_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

label_components = _active.label_components
nearest_distances = _active.nearest_distances
perplexity_bisection = _active.perplexity_bisection
