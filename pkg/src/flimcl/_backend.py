"""Pick the compiled kernels when available; ``FLIMCL_PURE_PYTHON=1`` forces the fallback."""
import os

from . import _kernels_py as python_kernels

if os.environ.get("FLIMCL_PURE_PYTHON", "") not in ("", "0"):
    kernels = python_kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        kernels = python_kernels
        BACKEND = "python"

best_split = kernels.best_split
tree_apply = kernels.tree_apply
confident_joint_counts = kernels.confident_joint_counts
