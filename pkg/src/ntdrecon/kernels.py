"""Element kernel dispatch: compiled extension when built, numpy otherwise.

Set ``NTDRECON_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("NTDRECON_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

PHI = _kernels_py.PHI


def _contig(a, dtype):
    import numpy as np

    return np.ascontiguousarray(a, dtype=dtype)


def p1_gradients(vertices, tets):
    import numpy as np

    return _impl.p1_gradients(_contig(vertices, float), _contig(tets, np.int64))


def stiffness_local(grads, vol, gam):
    return _impl.stiffness_local(_contig(grads, float), _contig(vol, float), _contig(gam, float))


def quad_mass_local(qvals, vol):
    return _impl.quad_mass_local(_contig(qvals, float), _contig(vol, float))


def cubic_terms(u_tet, alpha, vol):
    return _impl.cubic_terms(_contig(u_tet, float), _contig(alpha, float), _contig(vol, float))
