"""Backend selection for the hot synthetic-weight kernels.

The compiled extension is used when it was built and imports cleanly;
otherwise the NumPy implementation is used. Setting the environment
variable ``SYNTAX_DESIGN_PURE_PYTHON=1`` forces the NumPy path.
"""

import os

from syntax_design import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if not os.environ.get("SYNTAX_DESIGN_PURE_PYTHON"):
    try:
        from syntax_design import _core as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if _impl is compiled_backend else "python"

gram = _impl.gram
solutions = _impl.solutions
phantom = _impl.phantom
