"""Hot per-node kernels with a numba path and a pure-numpy path.

``NCL_BACKEND=numpy`` (or a missing numba install) selects the numpy path;
the default is numba. Both modules expose the same functions.
"""

import os

from . import _numpy

BACKEND = os.environ.get("NCL_BACKEND", "numba").lower()

if BACKEND == "numba":
    try:
        from . import _numba as impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        impl, BACKEND = _numpy, "numpy"
else:
    impl, BACKEND = _numpy, "numpy"


def neighborhood_extreme(Z, ptr, idx, use_max):
    return impl.neighborhood_extreme(Z, ptr, idx, use_max)


def grad_hull(Z, ptr, idx, G, delta):
    X, fallback, resolved = impl.grad_hull(Z, ptr, idx, G, delta)
    for i in [int(k) for k in (~resolved).nonzero()[0]]:
        # too many bases for the compiled enumerator; scipy's LP takes over
        X[i], fallback[i], _ = _numpy.hull_node(Z[idx[ptr[i]:ptr[i + 1]]], Z[i], G[i], delta)
    return X, fallback


def grad_cube(Z, ptr, idx, G, delta):
    return impl.grad_cube(Z, ptr, idx, G, delta)


def hull_node(P, z, g, delta):
    x, fb, resolved = impl.hull_node(P, z, g, delta)
    if not resolved:
        x, fb, _ = _numpy.hull_node(P, z, g, delta)
    return x, bool(fb)


def cube_node(P, z, g, delta):
    x, fb = impl.cube_node(P, z, g, delta)
    return x, bool(fb)
