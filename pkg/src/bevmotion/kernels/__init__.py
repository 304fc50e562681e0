"""Hot numeric kernels: compiled extension when available, NumPy otherwise.

Entry points: `sinkhorn_core` (entropic optimal-transport scaling loop),
`cluster_core` (all-pairs motion-consistency penalty) and the smooth-L1
objective cores (`sup_core`, `forward_core`, `backward_core`) that dominate
the descent loop. Both backends implement identical algorithms; `BACKEND`
reports which one loaded. Set the environment variable
BEVMOTION_PURE_PYTHON=1 to force the fallback.
"""

import os

if os.environ.get("BEVMOTION_PURE_PYTHON"):
    from . import _numpy_impl as _impl
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build environment
        from . import _numpy_impl as _impl

BACKEND = _impl.BACKEND
sinkhorn_core = _impl.sinkhorn_core
cluster_core = _impl.cluster_core
sup_core = _impl.sup_core
forward_core = _impl.forward_core
backward_core = _impl.backward_core

__all__ = ["BACKEND", "sinkhorn_core", "cluster_core", "sup_core",
           "forward_core", "backward_core"]
