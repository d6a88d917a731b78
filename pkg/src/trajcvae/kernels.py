"""Hot numeric kernels, each with a numba loop version and a numpy version.

The public functions dispatch on :func:`trajcvae._accel.use_numba`. Both
paths compute the same quantities; they differ only in floating-point
summation order.

Convolution primitives work on zero-padded inputs and are shared by the
ordinary and transposed 1D convolution layers:

* ``corr``       y[n, o, l]       = sum_{c, j} w[o, c, j] * x[n, c, l*s + j]
* ``corr_grad_w`` gw[o, c, j]     = sum_{n, l} gy[n, o, l] * x[n, c, l*s + j]
* ``scatter``    out[n, c, l*s+j] += sum_o gy[n, o, l] * w[o, c, j]

``scatter`` is the adjoint of ``corr`` with respect to its input.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@njit
def _im2col_nb(x, k, stride, length_out):
    n_b, n_c, _ = x.shape
    cols = np.empty((n_b * length_out, n_c * k))
    for n in range(n_b):
        for l in range(length_out):
            r = n * length_out + l
            base = l * stride
            for c in range(n_c):
                for j in range(k):
                    cols[r, c * k + j] = x[n, c, base + j]
    return cols


@njit
def _corr_nb(x, w2t, k, stride, length_out):
    # w2t: (C*K, O); returns (N*L, O)
    return np.dot(_im2col_nb(x, k, stride, length_out), w2t)


@njit
def _corr_grad_w_nb(x, gy2, k, stride, length_out):
    # gy2: (N*L, O); returns (C*K, O)
    cols = _im2col_nb(x, k, stride, length_out)
    return np.dot(np.ascontiguousarray(cols.T), gy2)


@njit
def _scatter_nb(gy2, w2, n_b, length_in, n_c, k, stride, length_full):
    # gy2: (N*L, O), w2: (O, C*K); col2im of their product
    contrib = np.dot(gy2, w2)
    out = np.zeros((n_b, n_c, length_full))
    for n in range(n_b):
        for l in range(length_in):
            r = n * length_in + l
            base = l * stride
            for c in range(n_c):
                for j in range(k):
                    out[n, c, base + j] += contrib[r, c * k + j]
    return out


def _windows(x, k, stride, length_out):
    if x.shape[2] < k:
        x = np.pad(x, ((0, 0), (0, 0), (0, k - x.shape[2])))
    win = sliding_window_view(x, k, axis=2)
    return win[:, :, : (length_out - 1) * stride + 1 : stride, :]


def _corr_np(x, w, stride, length_out):
    win = _windows(x, w.shape[2], stride, length_out)
    # (N, C, L, K) x (O, C, K) -> (N, L, O)
    return np.ascontiguousarray(np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1))


def _corr_grad_w_np(x, gy, k, stride):
    win = _windows(x, k, stride, gy.shape[2])
    # (N, O, L) x (N, C, L, K) -> (O, C, K)
    return np.tensordot(gy, win, axes=([0, 2], [0, 2]))


def _scatter_np(gy, w, stride, length_full):
    n_b, _, length_in = gy.shape
    k = w.shape[2]
    out = np.zeros((n_b, w.shape[1], length_full))
    # (N, O, L) x (O, C, K) -> (N, L, C, K)
    contrib = np.tensordot(gy, w, axes=([1], [0]))
    stop = (length_in - 1) * stride + 1
    for j in range(k):
        out[:, :, j : j + stop : stride] += contrib[:, :, :, j].transpose(0, 2, 1)
    return out


def _rows_by_time(gy):
    # (N, O, L) -> (N*L, O)
    return np.ascontiguousarray(gy.transpose(0, 2, 1)).reshape(-1, gy.shape[1])


def corr(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n_o, _, k = w.shape
    length_out = (x.shape[2] - k) // stride + 1
    if use_numba():
        w2t = np.ascontiguousarray(w.reshape(n_o, -1).T)
        out = _corr_nb(np.ascontiguousarray(x), w2t, k, stride, length_out)
        return np.ascontiguousarray(out.reshape(x.shape[0], length_out, n_o).transpose(0, 2, 1))
    return _corr_np(x, w, stride, length_out)


def corr_grad_w(x: np.ndarray, gy: np.ndarray, k: int, stride: int) -> np.ndarray:
    if use_numba():
        n_o = gy.shape[1]
        gw = _corr_grad_w_nb(np.ascontiguousarray(x), _rows_by_time(gy), k, stride, gy.shape[2])
        return np.ascontiguousarray(gw.T).reshape(n_o, x.shape[1], k)
    return _corr_grad_w_np(x, gy, k, stride)


def scatter(gy: np.ndarray, w: np.ndarray, stride: int, length_full: int) -> np.ndarray:
    if use_numba():
        n_o, n_c, k = w.shape
        w2 = np.ascontiguousarray(w).reshape(n_o, n_c * k)
        return _scatter_nb(_rows_by_time(gy), w2, gy.shape[0], gy.shape[2], n_c, k, stride, length_full)
    return _scatter_np(gy, w, stride, length_full)


# ---------------------------------------------------------------------------
# Bhattacharyya coefficient between diagonal Gaussians
# ---------------------------------------------------------------------------


@njit
def _bc_rows_nb(mu_a, var_a, mu_b, var_b):
    n, d = mu_a.shape
    out = np.empty(n)
    for i in range(n):
        acc = 1.0
        for k in range(d):
            va = var_a[i, k]
            vb = var_b[i, k]
            tot = va + vb
            diff = mu_a[i, k] - mu_b[i, k]
            acc *= np.sqrt(2.0 * np.sqrt(va * vb) / tot) * np.exp(-0.25 * diff * diff / tot)
        out[i] = acc
    return out


def _bc_rows_np(mu_a, var_a, mu_b, var_b):
    tot = var_a + var_b
    diff = mu_a - mu_b
    factors = np.sqrt(2.0 * np.sqrt(var_a * var_b) / tot) * np.exp(-0.25 * diff * diff / tot)
    return np.prod(factors, axis=1)


def bc_rows(mu_a, var_a, mu_b, var_b) -> np.ndarray:
    """Row-wise BC between paired diagonal Gaussians, arrays of shape (n, d)."""
    if use_numba():
        return _bc_rows_nb(
            np.ascontiguousarray(mu_a, dtype=np.float64),
            np.ascontiguousarray(var_a, dtype=np.float64),
            np.ascontiguousarray(mu_b, dtype=np.float64),
            np.ascontiguousarray(var_b, dtype=np.float64),
        )
    return _bc_rows_np(mu_a, var_a, mu_b, var_b)


# pair-selection modes for ``bc_exceed_count``
PAIRS_DISTINCT_DAYS = 0  # t != t'
PAIRS_ADJACENT_DAYS = 1  # |t - t'| == 1
PAIRS_SAME_DAY = 2  # t == t'


@njit
def _bc_exceed_nb(mu_a, var_a, day_a, mu_b, var_b, day_b, s, mode, same):
    n_a, d = mu_a.shape
    n_b = mu_b.shape[0]
    hits = 0
    total = 0
    for i in range(n_a):
        start = i + 1 if same else 0
        for j in range(start, n_b):
            delta = day_a[i] - day_b[j]
            if mode == 0:
                keep = delta != 0
            elif mode == 1:
                keep = delta == 1 or delta == -1
            else:
                keep = delta == 0
            if not keep:
                continue
            acc = 1.0
            for k in range(d):
                va = var_a[i, k]
                vb = var_b[j, k]
                tot = va + vb
                diff = mu_a[i, k] - mu_b[j, k]
                acc *= np.sqrt(2.0 * np.sqrt(va * vb) / tot) * np.exp(-0.25 * diff * diff / tot)
            total += 1
            if acc >= s:
                hits += 1
    return hits, total


def _pair_mask(day_a, day_b, mode, same):
    delta = day_a[:, None] - day_b[None, :]
    if mode == PAIRS_DISTINCT_DAYS:
        mask = delta != 0
    elif mode == PAIRS_ADJACENT_DAYS:
        mask = np.abs(delta) == 1
    else:
        mask = delta == 0
    if same:
        mask &= np.triu(np.ones(mask.shape, dtype=bool), k=1)
    return mask


def _bc_exceed_np(mu_a, var_a, day_a, mu_b, var_b, day_b, s, mode, same):
    mask = _pair_mask(day_a, day_b, mode, same)
    ii, jj = np.nonzero(mask)
    if ii.size == 0:
        return 0, 0
    vals = _bc_rows_np(mu_a[ii], var_a[ii], mu_b[jj], var_b[jj])
    return int(np.count_nonzero(vals >= s)), int(ii.size)


def bc_exceed_count(mu_a, var_a, day_a, mu_b, var_b, day_b, s: float, mode: int, same: bool):
    """Count pairs (i, j) selected by ``mode`` whose BC is at least ``s``.

    With ``same=True`` the two sets are the same embeddings and only i < j
    is visited. Returns ``(hits, total)``.
    """
    day_a = np.asarray(day_a, dtype=np.int64)
    day_b = np.asarray(day_b, dtype=np.int64)
    if use_numba():
        hits, total = _bc_exceed_nb(
            np.ascontiguousarray(mu_a, dtype=np.float64),
            np.ascontiguousarray(var_a, dtype=np.float64),
            day_a,
            np.ascontiguousarray(mu_b, dtype=np.float64),
            np.ascontiguousarray(var_b, dtype=np.float64),
            day_b,
            float(s),
            int(mode),
            bool(same),
        )
        return int(hits), int(total)
    return _bc_exceed_np(mu_a, var_a, day_a, mu_b, var_b, day_b, s, mode, same)


# ---------------------------------------------------------------------------
# SBM mean-field sweep
# ---------------------------------------------------------------------------


@njit
def _ve_sweep_nb(adj, mask, tau, log_rho, log_a, log_1ma):
    n, n_groups = tau.shape
    score = np.empty(n_groups)
    for b in range(n):
        for r in range(n_groups):
            score[r] = log_rho[r]
        for bp in range(n):
            if mask[b, bp] == 0.0:
                continue
            a = adj[b, bp]
            for r in range(n_groups):
                acc = 0.0
                for rp in range(n_groups):
                    acc += tau[bp, rp] * (a * log_a[r, rp] + (1.0 - a) * log_1ma[r, rp])
                score[r] += acc
        top = score[0]
        for r in range(1, n_groups):
            if score[r] > top:
                top = score[r]
        norm = 0.0
        for r in range(n_groups):
            score[r] = np.exp(score[r] - top)
            norm += score[r]
        for r in range(n_groups):
            tau[b, r] = score[r] / norm
    return tau


def _ve_sweep_np(adj, mask, tau, log_rho, log_a, log_1ma):
    on = adj * mask
    off = (1.0 - adj) * mask
    for b in range(tau.shape[0]):
        score = log_rho + log_a @ (tau.T @ on[b]) + log_1ma @ (tau.T @ off[b])
        score = np.exp(score - score.max())
        tau[b] = score / score.sum()
    return tau


def ve_sweep(adj, mask, tau, log_rho, log_alpha, log_1m_alpha) -> np.ndarray:
    """One Gauss-Seidel pass of the mean-field update over all nodes, in place.

    ``adj`` holds 0/1 with NA dyads set to 0, ``mask`` is 1 on observed dyads
    and 0 on NA dyads and the diagonal.
    """
    if use_numba():
        return _ve_sweep_nb(adj, mask, tau, log_rho, log_alpha, log_1m_alpha)
    return _ve_sweep_np(adj, mask, tau, log_rho, log_alpha, log_1m_alpha)
