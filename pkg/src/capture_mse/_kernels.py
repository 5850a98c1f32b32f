"""Per-stratum Laplace deviance kernel, JIT-compiled with numba when available.

Each stratum is an independent block: Newton iterations on the spherical
random effects ``v`` (q values) with step halving, then a Cholesky factor of
``H = A' W A + I`` for the log-determinant.  Blocks are at most 7x7, so
everything is written as plain loops.
"""

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def _cholesky(H, L):
    q = H.shape[0]
    for i in range(q):
        for j in range(i + 1):
            s = H[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _chol_solve(L, b, out):
    q = L.shape[0]
    for i in range(q):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(q - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, q):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _block_state(y, offset, A, v, eta, mu):
    m, q = A.shape
    h = 0.0
    for c in range(m):
        e = offset[c]
        for k in range(q):
            e += A[c, k] * v[k]
        eta[c] = e
        if e > 700.0:
            return -np.inf
        mu[c] = math.exp(e)
        h += y[c] * e - mu[c]
    for k in range(q):
        h -= 0.5 * v[k] * v[k]
    return h


@njit(cache=True)
def laplace_deviance(y, X, Z, beta, sd, v, tol, max_iter):
    """Sum over strata of deviance residuals + |v|^2 + log det H.

    ``v`` (strata, q) is updated in place with the conditional modes and
    serves as the warm start for the next call.  Returns
    ``(objective, status)`` with status 0 = ok, 1 = inner cap reached,
    2 = non-finite or non-positive-definite.
    """
    r, m = y.shape
    p = X.shape[2]
    q = Z.shape[1]
    A = np.empty((m, q))
    for c in range(m):
        for k in range(q):
            A[c, k] = Z[c, k] * sd[k]
    offset = np.empty(m)
    eta = np.empty(m)
    mu = np.empty(m)
    eta_new = np.empty(m)
    mu_new = np.empty(m)
    g = np.empty(q)
    H = np.empty((q, q))
    L = np.zeros((q, q))
    step = np.empty(q)
    v_new = np.empty(q)
    total = 0.0
    status = 0
    for l in range(r):
        for c in range(m):
            s = 0.0
            for j in range(p):
                s += X[l, c, j] * beta[j]
            offset[c] = s
        vl = v[l]
        h = _block_state(y[l], offset, A, vl, eta, mu)
        if not math.isfinite(h):
            for k in range(q):
                vl[k] = 0.0
            h = _block_state(y[l], offset, A, vl, eta, mu)
            if not math.isfinite(h):
                return np.inf, 2
        converged = False
        for _ in range(max_iter):
            gmax = 0.0
            for k in range(q):
                s = -vl[k]
                for c in range(m):
                    s += (y[l, c] - mu[c]) * A[c, k]
                g[k] = s
                if abs(s) > gmax:
                    gmax = abs(s)
            if gmax < tol:
                converged = True
                break
            for i in range(q):
                for j in range(i + 1):
                    s = 1.0 if i == j else 0.0
                    for c in range(m):
                        s += A[c, i] * mu[c] * A[c, j]
                    H[i, j] = s
                    H[j, i] = s
            if not _cholesky(H, L):
                return np.inf, 2
            _chol_solve(L, g, step)
            t = 1.0
            accepted = False
            for _h in range(40):
                for k in range(q):
                    v_new[k] = vl[k] + t * step[k]
                h_new = _block_state(y[l], offset, A, v_new, eta_new, mu_new)
                if math.isfinite(h_new) and h_new >= h - 1e-12 * abs(h):
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            smax = 0.0
            for k in range(q):
                if abs(t * step[k]) > smax:
                    smax = abs(t * step[k])
                vl[k] = v_new[k]
            for c in range(m):
                eta[c] = eta_new[c]
                mu[c] = mu_new[c]
            h = h_new
            if smax < 1e-13:
                converged = True
                break
        if not converged:
            status = 1
        for i in range(q):
            for j in range(i + 1):
                s = 1.0 if i == j else 0.0
                for c in range(m):
                    s += A[c, i] * mu[c] * A[c, j]
                H[i, j] = s
                H[j, i] = s
        if not _cholesky(H, L):
            return np.inf, 2
        logdet = 0.0
        for k in range(q):
            logdet += 2.0 * math.log(L[k, k])
        dev = 0.0
        for c in range(m):
            yc = y[l, c]
            if yc > 0.0:
                dev += 2.0 * (yc * math.log(yc / mu[c]) - (yc - mu[c]))
            else:
                dev += 2.0 * mu[c]
        vv = 0.0
        for k in range(q):
            vv += vl[k] * vl[k]
        total += dev + vv + logdet
    return total, status
