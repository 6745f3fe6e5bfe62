"""Hot numeric kernels with a compiled fast path and a numpy fallback.

The compiled module is used when it was built and ``EVTLAB_PURE_PYTHON`` is
unset. Both implementations accumulate in the same order, so forward results
agree bit for bit; :data:`BACKEND` names the active one.
"""

import os

import numpy as np

from evtlab._kernels import _pykernels

_compiled = None
if not os.environ.get("EVTLAB_PURE_PYTHON"):
    try:
        from evtlab._kernels import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _pykernels


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def backend_module(name=None):
    """Return the kernel module for ``name`` (defaults to the active backend)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b, impl=None):
    """Fixed-order product ``a @ b``.

    ``a`` is (..., m, k); ``b`` is either (k, n) or has the same leading
    dimensions as ``a``.
    """
    impl = impl or _impl
    m, k = a.shape[-2:]
    if b.ndim == 2:
        lead = a.shape[:-2]
        a3 = _c64(a).reshape(1, -1, k)
        out = impl.bmm(a3, _c64(b)[None])
        return out.reshape(lead + (m, b.shape[1]))
    lead = a.shape[:-2]
    n = b.shape[-1]
    a3 = _c64(a).reshape(-1, m, k)
    b3 = _c64(b).reshape(-1, k, n)
    return impl.bmm(a3, b3).reshape(lead + (m, n))


def dwconv2d(x, w, stride, pad, impl=None):
    return (impl or _impl).dwconv2d(_c64(x), _c64(w), int(stride), int(pad))


def dwconv2d_grad_input(g, w, x_shape, stride, pad, impl=None):
    return (impl or _impl).dwconv2d_grad_input(_c64(g), _c64(w), tuple(x_shape), int(stride), int(pad))


def dwconv2d_grad_weight(g, x, w_shape, stride, pad, impl=None):
    return (impl or _impl).dwconv2d_grad_weight(_c64(g), _c64(x), tuple(w_shape), int(stride), int(pad))
