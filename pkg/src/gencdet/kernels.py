"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy versions
in :mod:`gencdet._kernels_py` are used. Set ``GENCDET_KERNELS=python`` to force
the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("GENCDET_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

mdn_log_density = _impl.mdn_log_density
mdn_nll_grad = _impl.mdn_nll_grad
perm_u_numerators = _impl.perm_u_numerators
mdn_train_epoch = _impl.mdn_train_epoch
