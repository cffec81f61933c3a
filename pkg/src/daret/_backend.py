"""Selects the compiled kernels when available, pure fallback otherwise.

Selection happens once at import. Tests that need a specific backend import
daret._kernels or daret._kernels_py directly instead of flipping state here.
"""

try:
    from . import _kernels as _impl
except ImportError:  # extension not built; pure path is fully equivalent
    from . import _kernels_py as _impl

BACKEND_NAME = _impl.BACKEND_NAME
classifier_sweep = _impl.classifier_sweep
top_k_select = _impl.top_k_select
top_k_batch = _impl.top_k_batch
