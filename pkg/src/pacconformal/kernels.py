"""Backend selection for the scalar kernels.

The compiled extension is used when it was built and ``PACCONFORMAL_PURE_PYTHON``
is unset; otherwise the pure-Python module is used.  ``BACKEND`` names the
active choice and both backends stay importable for comparison.
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and not os.environ.get("PACCONFORMAL_PURE_PYTHON"):
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = python_backend
    BACKEND = "python"

bernoulli_kl = _impl.bernoulli_kl
kl_inverse_upper = _impl.kl_inverse_upper
betainc = _impl.betainc
log_beta_pdf = _impl.log_beta_pdf
vovk_2b_index = _impl.vovk_2b_index
rotate_bilinear = _impl.rotate_bilinear

__all__ = [
    "BACKEND", "python_backend", "compiled_backend", "bernoulli_kl",
    "kl_inverse_upper", "betainc", "log_beta_pdf", "vovk_2b_index", "rotate_bilinear",
]
