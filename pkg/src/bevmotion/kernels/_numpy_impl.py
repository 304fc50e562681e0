"""NumPy reference implementations of the hot kernels.

Motion arrays are (T', N, 2): per-step 2D displacements at N cells. The
smooth-L1 terms reduce by the mean over cells and components and sum over
steps; the cluster term follows its own pair normalization.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "numpy"

#: Rescale the Sinkhorn scalings into the log-domain potentials once they
#: exceed this magnitude, so the kernel matrix never over/underflows.
_ABSORB_LIMIT = 1e100


def sinkhorn_core(cost: np.ndarray, eps: float, max_iters: int, tol: float):
    """Entropic OT between uniform marginals via stabilized Sinkhorn scaling.

    Alternates row/column scalings of K = exp(-cost / eps) toward marginals
    1/N (rows) and 1/M (columns). Whenever a scaling vector grows past a safe
    magnitude it is absorbed into log-domain potentials and the kernel is
    re-centered, which keeps every intermediate finite for arbitrarily small
    eps. Stops once the worst row-marginal deviation drops below `tol`
    (column marginals are exact after each column update).

    Returns (plan, iterations, converged, max_row_deviation).
    """
    C = np.ascontiguousarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise ValueError(f"cost must be a non-empty 2D array, got shape {C.shape}")
    if not np.isfinite(C).all():
        raise FloatingPointError("cost matrix contains non-finite entries")
    n, m = C.shape
    r = 1.0 / n
    c = 1.0 / m

    f = np.zeros(n)
    g = np.zeros(m)
    K = np.exp(-C / eps)
    u = np.ones(n)
    v = np.ones(m)

    converged = False
    row_dev = np.inf
    it = 0
    while it < max_iters:
        it += 1
        Kv = K @ v
        if not (Kv > 0).all():
            raise FloatingPointError("kernel column collapsed to zero; increase eps")
        if it > 1:
            # rows of the plan after the previous full iteration; columns
            # are exact there by construction
            row_dev = float(np.abs(u * Kv - r).max())
            if row_dev < tol:
                converged = True
                break
        u = r / Kv
        KTu = K.T @ u
        if not (KTu > 0).all():
            raise FloatingPointError("kernel row collapsed to zero; increase eps")
        v = c / KTu
        if max(u.max(), v.max()) > _ABSORB_LIMIT:
            f += eps * np.log(u)
            g += eps * np.log(v)
            K = np.exp((f[:, None] + g[None, :] - C) / eps)
            u = np.ones(n)
            v = np.ones(m)

    plan = (u[:, None] * K) * v[None, :]
    if not np.isfinite(plan).all():
        raise FloatingPointError("transport plan contains non-finite entries")
    return plan, it, converged, row_dev


def _smooth_l1(x: np.ndarray, delta: float):
    ax = np.abs(x)
    quad = ax < delta
    val = np.where(quad, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.where(quad, x / delta, np.sign(x))
    return val, grad


def sup_core(pred: np.ndarray, labels: np.ndarray, delta: float,
             want_grad: bool = True):
    """Smooth-L1 supervision, summed over steps, averaged over cells and
    the two components. Returns (value, grad wrt pred or None)."""
    n = pred.shape[1]
    if n == 0:
        return 0.0, (np.zeros_like(pred) if want_grad else None)
    val, grad = _smooth_l1(pred - labels, delta)
    scale = 1.0 / (2.0 * n)
    return float(val.sum() * scale), (grad * scale if want_grad else None)


def forward_core(pred: np.ndarray, delta: float, want_grad: bool = True):
    """Adjacent-horizon consistency: step t against t/(t+1) times step t+1.

    Returns (value, grad or None); zero when T' < 2.
    """
    t_prime, n = pred.shape[0], pred.shape[1]
    grad = np.zeros_like(pred) if want_grad else None
    if t_prime < 2 or n == 0:
        return 0.0, grad
    scale = 1.0 / (2.0 * n)
    total = 0.0
    for i in range(t_prime - 1):
        factor = (i + 1.0) / (i + 2.0)
        val, g = _smooth_l1(pred[i] - factor * pred[i + 1], delta)
        total += val.sum() * scale
        if want_grad:
            grad[i] += g * scale
            grad[i + 1] -= factor * g * scale
    return float(total), grad


def backward_core(fwd: np.ndarray, bwd: np.ndarray, theta_b: float,
                  delta: float, want_grad: bool = True):
    """Forward/backward opposition with exp(-t / theta_b) step weights.

    Returns (value, grad wrt fwd or None, grad wrt bwd or None).
    """
    t_prime, n = fwd.shape[0], fwd.shape[1]
    grad_f = np.zeros_like(fwd) if want_grad else None
    grad_b = np.zeros_like(bwd) if want_grad else None
    if n == 0:
        return 0.0, grad_f, grad_b
    scale = 1.0 / (2.0 * n)
    total = 0.0
    for i in range(t_prime):
        weight = math.exp(-(i + 1.0) / theta_b)
        val, g = _smooth_l1(fwd[i] + bwd[i], delta)
        total += weight * val.sum() * scale
        if want_grad:
            grad_f[i] = weight * g * scale
            grad_b[i] = weight * g * scale
    return float(total), grad_f, grad_b


def cluster_core(motion: np.ndarray, members: np.ndarray, starts: np.ndarray,
                 want_grad: bool = True):
    """All-ordered-pairs motion spread over clusters, with its gradient.

    motion: (T, N, 2) per-step motion at N cells.
    members: (K,) indices into the N axis, grouped by cluster.
    starts: (S + 1,) offsets so cluster s owns members[starts[s]:starts[s+1]].

    value = sum_t (1/S) * sum_s |s|^-2 * sum_{i,j in s} ||m_ti - m_tj||.
    The gradient of ||.|| at coincident motions is taken as zero.
    """
    motion = np.asarray(motion, dtype=np.float64)
    members = np.asarray(members, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    grad = np.zeros_like(motion) if want_grad else None
    n_clusters = starts.size - 1
    if n_clusters <= 0:
        return 0.0, grad

    total = 0.0
    inv_s = 1.0 / n_clusters
    for s in range(n_clusters):
        idx = members[starts[s]:starts[s + 1]]
        k = idx.size
        if k <= 1:
            continue
        w = inv_s / (k * k)
        x = motion[:, idx, :]
        diff = x[:, :, None, :] - x[:, None, :, :]
        nrm = np.sqrt(np.einsum("tijk,tijk->tij", diff, diff))
        total += w * float(nrm.sum())
        if want_grad:
            safe = np.where(nrm > 0.0, nrm, 1.0)
            unit = diff / safe[..., None]
            unit[nrm == 0.0] = 0.0
            grad[:, idx, :] += (2.0 * w) * unit.sum(axis=2)
    return total, grad
