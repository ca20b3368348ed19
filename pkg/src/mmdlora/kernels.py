"""Backend selection for the hot numeric kernels.

The environment variable MMDLORA_BACKEND picks the implementation at import
time: "numba" (default when numba is importable) or "numpy". Matrix products
use BLAS via np.dot under both backends; only the fused element/row kernels
differ. `benchmarks/bench_backends.py` compares the two.
"""

import os

from . import _kernels_np as numpy_impl
from .errors import ConfigError

ENV_VAR = "MMDLORA_BACKEND"

_KERNELS = (
    "softmax_rows",
    "softmax_rows_grad",
    "logsumexp_rows",
    "logsumexp_rows_grad",
    "layernorm_rows",
    "layernorm_rows_grad",
    "unit_rows",
    "unit_rows_grad",
    "adamw_update",
    "paint_rects",
    "streak_field",
    "metrics_accum",
)


def _load_numba_impl():
    from . import _kernels_nb

    return _kernels_nb


def _pick():
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ConfigError(
            f"{ENV_VAR} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy", numpy_impl
    try:
        return "numba", _load_numba_impl()
    except ImportError:
        if choice == "numba":
            raise ConfigError(
                f"{ENV_VAR}=numba requested but numba is not importable"
            ) from None
        return "numpy", numpy_impl


BACKEND, _impl = _pick()

softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
logsumexp_rows = _impl.logsumexp_rows
logsumexp_rows_grad = _impl.logsumexp_rows_grad
layernorm_rows = _impl.layernorm_rows
layernorm_rows_grad = _impl.layernorm_rows_grad
unit_rows = _impl.unit_rows
unit_rows_grad = _impl.unit_rows_grad
adamw_update = _impl.adamw_update
paint_rects = _impl.paint_rects
streak_field = _impl.streak_field
metrics_accum = _impl.metrics_accum


def implementations():
    """Return {backend name: module} for every importable backend."""
    impls = {"numpy": numpy_impl}
    try:
        impls["numba"] = _load_numba_impl()
    except ImportError:
        pass
    return impls


def kernel_names():
    return _KERNELS
