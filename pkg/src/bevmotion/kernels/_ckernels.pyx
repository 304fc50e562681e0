# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels.

Same contracts as kernels._numpy_impl; loops are fused to avoid the
per-call temporaries and dispatch overhead that dominate at the
few-thousand-cell sizes this pipeline runs at.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, sqrt
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

BACKEND = "compiled"

cdef double _ABSORB_LIMIT = 1e100


cdef void _kv(double* K, double* x, double* y, int n, int m) nogil:
    # y = K @ x for row-major K (n x m): the same memory is a Fortran
    # (m x n) matrix A = K^T, so K @ x = A^T @ x.
    cdef char trans = b'T'
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    dgemv(&trans, &m, &n, &one, K, &m, x, &inc, &zero, y, &inc)


cdef void _ktu(double* K, double* x, double* y, int n, int m) nogil:
    # y = K.T @ x: A @ x with the Fortran view A = K^T.
    cdef char trans = b'N'
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    dgemv(&trans, &m, &n, &one, K, &m, x, &inc, &zero, y, &inc)


def sinkhorn_core(object cost, double eps, int max_iters, double tol):
    """Entropic OT between uniform marginals via stabilized Sinkhorn scaling.

    Mirrors the NumPy backend (BLAS matvecs, fused scalar updates): returns
    (plan, iterations, converged, max_row_deviation); raises
    FloatingPointError on collapse to zero or non-finite values.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] C = \
        np.ascontiguousarray(cost, dtype=np.float64)
    if C.size == 0:
        raise ValueError("cost must be a non-empty 2D array")
    if not np.isfinite(C).all():
        raise FloatingPointError("cost matrix contains non-finite entries")

    cdef int n = <int>C.shape[0]
    cdef int m = <int>C.shape[1]
    cdef double r = 1.0 / n
    cdef double c = 1.0 / m

    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] K = np.empty((n, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.ones(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.ones(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] kv = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ktu = np.empty(m)

    cdef double[:, ::1] Cm = C
    cdef double[:, ::1] Km = K
    cdef double[::1] fm = f, gm = g, um = u, vm = v, kvm = kv, ktum = ktu

    cdef Py_ssize_t i, j
    cdef double s, dev, umax, vmax
    cdef bint converged = False
    cdef bint collapsed_col = False, collapsed_row = False
    cdef int it = 0
    cdef double row_dev = np.inf

    with nogil:
        for i in range(n):
            for j in range(m):
                Km[i, j] = exp(-Cm[i, j] / eps)

        while it < max_iters:
            it += 1
            _kv(&Km[0, 0], &vm[0], &kvm[0], n, m)
            for i in range(n):
                if not kvm[i] > 0.0:
                    collapsed_col = True
                    break
            if collapsed_col:
                break
            if it > 1:
                # rows of the plan after the previous full iteration;
                # columns are exact there by construction
                dev = 0.0
                for i in range(n):
                    s = fabs(um[i] * kvm[i] - r)
                    if s > dev:
                        dev = s
                row_dev = dev
                if dev < tol:
                    converged = True
                    break
            umax = 0.0
            for i in range(n):
                um[i] = r / kvm[i]
                if um[i] > umax:
                    umax = um[i]
            _ktu(&Km[0, 0], &um[0], &ktum[0], n, m)
            vmax = 0.0
            for j in range(m):
                if not ktum[j] > 0.0:
                    collapsed_row = True
                    break
                vm[j] = c / ktum[j]
                if vm[j] > vmax:
                    vmax = vm[j]
            if collapsed_row:
                break
            if umax > _ABSORB_LIMIT or vmax > _ABSORB_LIMIT:
                for i in range(n):
                    fm[i] += eps * log(um[i])
                    um[i] = 1.0
                for j in range(m):
                    gm[j] += eps * log(vm[j])
                    vm[j] = 1.0
                for i in range(n):
                    for j in range(m):
                        Km[i, j] = exp((fm[i] + gm[j] - Cm[i, j]) / eps)

    if collapsed_col:
        raise FloatingPointError("kernel column collapsed to zero; increase eps")
    if collapsed_row:
        raise FloatingPointError("kernel row collapsed to zero; increase eps")

    plan = np.empty((n, m))
    cdef double[:, ::1] pm = plan
    for i in range(n):
        for j in range(m):
            pm[i, j] = um[i] * Km[i, j] * vm[j]
    if not np.isfinite(plan).all():
        raise FloatingPointError("transport plan contains non-finite entries")
    return plan, it, converged, row_dev


cdef inline double _sl1_val(double x, double delta) nogil:
    cdef double ax = fabs(x)
    if ax < delta:
        return 0.5 * x * x / delta
    return ax - 0.5 * delta


cdef inline double _sl1_grad(double x, double delta) nogil:
    if fabs(x) < delta:
        return x / delta
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def sup_core(object pred_in, object labels_in, double delta,
             bint want_grad=True):
    """Smooth-L1 supervision, summed over steps, averaged over cells and
    the two components. Returns (value, grad wrt pred or None)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] pred = \
        np.ascontiguousarray(pred_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] labels = \
        np.ascontiguousarray(labels_in, dtype=np.float64)
    cdef Py_ssize_t T = pred.shape[0]
    cdef Py_ssize_t n = pred.shape[1]
    if n == 0:
        return 0.0, (np.zeros_like(pred) if want_grad else None)
    grad = np.zeros_like(pred) if want_grad else None

    cdef double[:, :, ::1] p = pred
    cdef double[:, :, ::1] l = labels
    cdef double[:, :, ::1] gm = grad if want_grad else pred
    cdef double scale = 1.0 / (2.0 * n)
    cdef double total = 0.0
    cdef double x
    cdef Py_ssize_t t, i, k
    for t in range(T):
        for i in range(n):
            for k in range(2):
                x = p[t, i, k] - l[t, i, k]
                total += _sl1_val(x, delta)
                if want_grad:
                    gm[t, i, k] = _sl1_grad(x, delta) * scale
    return total * scale, grad


def forward_core(object pred_in, double delta, bint want_grad=True):
    """Adjacent-horizon consistency: step t against t/(t+1) times step t+1.

    Returns (value, grad or None); zero when T' < 2.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] pred = \
        np.ascontiguousarray(pred_in, dtype=np.float64)
    cdef Py_ssize_t T = pred.shape[0]
    cdef Py_ssize_t n = pred.shape[1]
    grad = np.zeros_like(pred) if want_grad else None
    if T < 2 or n == 0:
        return 0.0, grad

    cdef double[:, :, ::1] p = pred
    cdef double[:, :, ::1] gm = grad if want_grad else pred
    cdef double scale = 1.0 / (2.0 * n)
    cdef double total = 0.0
    cdef double factor, x, gx
    cdef Py_ssize_t t, i, k
    for t in range(T - 1):
        factor = (t + 1.0) / (t + 2.0)
        for i in range(n):
            for k in range(2):
                x = p[t, i, k] - factor * p[t + 1, i, k]
                total += _sl1_val(x, delta)
                if want_grad:
                    gx = _sl1_grad(x, delta) * scale
                    gm[t, i, k] += gx
                    gm[t + 1, i, k] -= factor * gx
    return total * scale, grad


def backward_core(object fwd_in, object bwd_in, double theta_b, double delta,
                  bint want_grad=True):
    """Forward/backward opposition with exp(-t / theta_b) step weights.

    Returns (value, grad wrt fwd or None, grad wrt bwd or None).
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] fwd = \
        np.ascontiguousarray(fwd_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] bwd = \
        np.ascontiguousarray(bwd_in, dtype=np.float64)
    cdef Py_ssize_t T = fwd.shape[0]
    cdef Py_ssize_t n = fwd.shape[1]
    grad_f = np.zeros_like(fwd) if want_grad else None
    grad_b = np.zeros_like(bwd) if want_grad else None
    if n == 0:
        return 0.0, grad_f, grad_b

    cdef double[:, :, ::1] fm = fwd
    cdef double[:, :, ::1] bm = bwd
    cdef double[:, :, ::1] gf = grad_f if want_grad else fwd
    cdef double[:, :, ::1] gb = grad_b if want_grad else bwd
    cdef double scale = 1.0 / (2.0 * n)
    cdef double total = 0.0
    cdef double weight, x, gx
    cdef Py_ssize_t t, i, k
    for t in range(T):
        weight = exp(-(t + 1.0) / theta_b)
        for i in range(n):
            for k in range(2):
                x = fm[t, i, k] + bm[t, i, k]
                total += weight * _sl1_val(x, delta)
                if want_grad:
                    gx = weight * _sl1_grad(x, delta) * scale
                    gf[t, i, k] = gx
                    gb[t, i, k] = gx
    return total * scale, grad_f, grad_b


def cluster_core(object motion_in, object members_in, object starts_in,
                 bint want_grad=True):
    """All-ordered-pairs motion spread over clusters, with its gradient.

    Same contract as the NumPy backend: motion (T, N, 2), members grouped by
    cluster via starts (S + 1 offsets); returns (value, grad or None).
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] motion = \
        np.ascontiguousarray(motion_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] members = \
        np.ascontiguousarray(members_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] starts = \
        np.ascontiguousarray(starts_in, dtype=np.int64)

    grad = np.zeros_like(motion) if want_grad else None
    cdef Py_ssize_t n_clusters = starts.shape[0] - 1
    cdef Py_ssize_t T = motion.shape[0]
    if n_clusters <= 0:
        return 0.0, grad

    cdef double[:, :, ::1] mo = motion
    cdef double[:, :, ::1] gr = grad if want_grad else motion
    cdef long long[::1] mem = members
    cdef long long[::1] st = starts

    cdef double total = 0.0
    cdef double inv_s = 1.0 / n_clusters
    cdef Py_ssize_t s, t, a, b, ia, ib, k
    cdef double w, dx, dy, nrm, gx, gy

    for s in range(n_clusters):
        k = st[s + 1] - st[s]
        if k <= 1:
            continue
        w = inv_s / (<double>k * <double>k)
        for t in range(T):
            for a in range(st[s], st[s + 1]):
                ia = mem[a]
                gx = 0.0
                gy = 0.0
                for b in range(st[s], st[s + 1]):
                    ib = mem[b]
                    dx = mo[t, ia, 0] - mo[t, ib, 0]
                    dy = mo[t, ia, 1] - mo[t, ib, 1]
                    nrm = sqrt(dx * dx + dy * dy)
                    if nrm > 0.0:
                        total += w * nrm
                        gx += dx / nrm
                        gy += dy / nrm
                if want_grad:
                    gr[t, ia, 0] += 2.0 * w * gx
                    gr[t, ia, 1] += 2.0 * w * gy
    return total, grad
