# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: mixture-density training and permutation U-statistics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, fabs, isfinite, pow, M_PI
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double HALF_LOG_2PI = 0.5 * log(2.0 * M_PI)


cdef inline double softplus(double s) noexcept nogil:
    if s > 30.0:
        return s + log1p(exp(-s))
    return log1p(exp(s))


cdef inline double sigmoid(double s) noexcept nogil:
    cdef double e
    if s >= 0:
        return 1.0 / (1.0 + exp(-s))
    e = exp(s)
    return e / (1.0 + e)


cdef double _row_logs(const double[:, ::1] raw, const double[:, ::1] y, Py_ssize_t i,
                      int G, int p, double floor, double[::1] log_alpha,
                      double[::1] logc, double[::1] sigma, double[::1] sq) noexcept nogil:
    cdef Py_ssize_t g, k
    cdef double mx, acc, d, lse
    mx = raw[i, 0]
    for g in range(1, G):
        if raw[i, g] > mx:
            mx = raw[i, g]
    acc = 0.0
    for g in range(G):
        acc += exp(raw[i, g] - mx)
    lse = mx + log(acc)
    for g in range(G):
        log_alpha[g] = raw[i, g] - lse
        sigma[g] = floor + softplus(raw[i, G + G * p + g])
        acc = 0.0
        for k in range(p):
            d = y[i, k] - raw[i, G + g * p + k]
            acc += d * d
        sq[g] = acc
        logc[g] = log_alpha[g] - p * HALF_LOG_2PI - p * log(sigma[g]) - 0.5 * acc / (sigma[g] * sigma[g])
    mx = logc[0]
    for g in range(1, G):
        if logc[g] > mx:
            mx = logc[g]
    acc = 0.0
    for g in range(G):
        acc += exp(logc[g] - mx)
    return mx + log(acc)


def mdn_log_density(raw, y, int n_comp, double sigma_floor):
    cdef const double[:, ::1] r = np.ascontiguousarray(raw, dtype=np.float64)
    cdef const double[:, ::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], i
    cdef int p = r.shape[1] // n_comp - 2
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double[::1] la = np.empty(n_comp), lc = np.empty(n_comp)
    cdef double[::1] sg = np.empty(n_comp), sq = np.empty(n_comp)
    with nogil:
        for i in range(n):
            o[i] = _row_logs(r, yy, i, n_comp, p, sigma_floor, la, lc, sg, sq)
    return out


def mdn_nll_grad(raw, y, int n_comp, double sigma_floor):
    cdef const double[:, ::1] r = np.ascontiguousarray(raw, dtype=np.float64)
    cdef const double[:, ::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], i, g, k
    cdef int G = n_comp
    cdef int p = r.shape[1] // n_comp - 2
    grad = np.empty((n, r.shape[1]))
    cdef double[:, ::1] gr = grad
    cdef double[::1] la = np.empty(G), lc = np.empty(G)
    cdef double[::1] sg = np.empty(G), sq = np.empty(G)
    cdef double ll, total = 0.0, gam, iv
    with nogil:
        for i in range(n):
            ll = _row_logs(r, yy, i, G, p, sigma_floor, la, lc, sg, sq)
            total -= ll
            for g in range(G):
                gam = exp(lc[g] - ll)
                iv = 1.0 / (sg[g] * sg[g])
                gr[i, g] = exp(la[g]) - gam
                for k in range(p):
                    gr[i, G + g * p + k] = -gam * iv * (yy[i, k] - r[i, G + g * p + k])
                gr[i, G + G * p + g] = gam * (p / sg[g] - sq[g] * iv / sg[g]) * sigmoid(r[i, G + G * p + g])
    return total, grad


def perm_u_numerators(codes, Py_ssize_t m, Py_ssize_t n_codes, uniforms):
    cdef const long long[::1] c = np.ascontiguousarray(codes, dtype=np.int64)
    cdef const double[:, ::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], n_perm = u.shape[0], b, i, j, k
    cdef long long[::1] totals = np.zeros(n_codes, dtype=np.int64)
    cdef long long[::1] counts = np.zeros(n_codes, dtype=np.int64)
    cdef long long[::1] arr = np.empty(n, dtype=np.int64)
    out = np.empty(n_perm, dtype=np.int64)
    cdef long long[::1] o = out
    cdef long long sum_t2 = 0, s, t, tmp
    with nogil:
        for i in range(n):
            totals[c[i]] += 1
        for k in range(n_codes):
            sum_t2 += totals[k] * totals[k]
        for b in range(n_perm):
            for i in range(n):
                arr[i] = c[i]
            s = 0
            t = 0
            for i in range(m):
                j = i + <Py_ssize_t>(u[b, i] * (n - i))
                tmp = arr[i]
                arr[i] = arr[j]
                arr[j] = tmp
                k = arr[i]
                s += 2 * counts[k] + 1
                t += totals[k]
                counts[k] += 1
            for i in range(m):
                counts[arr[i]] = 0
            o[b] = 2 * (2 * m - 1) * (s - t) + m * sum_t2 - 2 * m * m
    return out


cdef inline void rm_gemm(char ta, char tb, int M, int N, int K, double* A, int lda,
                         double* B, int ldb, double* C, int ldc) noexcept nogil:
    # row-major C (M x N) = op(A) op(B), via the column-major routine on transposes
    cdef double one = 1.0, zero = 0.0
    dgemm(&tb, &ta, &N, &M, &K, &one, B, &ldb, A, &lda, &zero, C, &ldc)


def mdn_train_epoch(double[::1] flat, dims, double slope, x, y, perm, Py_ssize_t batch,
                    int n_comp, double sigma_floor, double[::1] m1, double[::1] m2,
                    long step, double lr, double beta1, double beta2, double eps):
    cdef const double[:, ::1] xx = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef const long long[::1] order = np.ascontiguousarray(perm, dtype=np.int64)
    cdef Py_ssize_t L = len(dims) - 1, i, r, c, k, b, j
    cdef Py_ssize_t n_batches = order.shape[0] // batch
    cdef long long[::1] dim = np.asarray(dims, dtype=np.int64)
    cdef long long[::1] w_off = np.empty(L, dtype=np.int64)
    cdef long long[::1] h_off = np.empty(L, dtype=np.int64)
    cdef Py_ssize_t pos = 0, hpos = 0, widest = 0
    for i in range(L):
        w_off[i] = pos
        pos += dim[i + 1] * dim[i] + dim[i + 1]
        h_off[i] = hpos
        hpos += batch * dim[i]
        widest = max(widest, dim[i], dim[i + 1])
    cdef int G = n_comp
    cdef int p = dim[L] // n_comp - 2
    cdef Py_ssize_t n_params = flat.shape[0]
    cdef double[::1] hbuf = np.empty(hpos)
    cdef double[:, ::1] raw = np.empty((batch, dim[L]))
    cdef double[:, ::1] yb = np.empty((batch, p))
    cdef double[::1] ga = np.empty(batch * widest), gb_ = np.empty(batch * widest)
    cdef double[::1] grad = np.empty(n_params)
    cdef double[::1] la = np.empty(G), lc = np.empty(G), sg = np.empty(G), sq = np.empty(G)
    cdef double *h
    cdef double *hn
    cdef double *w
    cdef double *g = &ga[0]
    cdef double *gn = &gb_[0]
    cdef double *tmp
    cdef double total = 0.0, loss, ll, gam, iv, lr_t, eps_t, acc, z, inv_m = 1.0 / batch
    cdef Py_ssize_t din, dout, src
    cdef int status = 0
    with nogil:
        for b in range(n_batches):
            # gather the batch into the first activation buffer
            h = &hbuf[h_off[0]]
            for r in range(batch):
                src = order[b * batch + r]
                for c in range(dim[0]):
                    h[r * dim[0] + c] = xx[src, c]
                for c in range(p):
                    yb[r, c] = yy[src, c]
            # forward
            for i in range(L):
                din = dim[i]
                dout = dim[i + 1]
                h = &hbuf[h_off[i]]
                w = &flat[w_off[i]]
                hn = &raw[0, 0] if i == L - 1 else &hbuf[h_off[i + 1]]
                rm_gemm(b'N', b'T', batch, dout, din, h, din, w, din, hn, dout)
                for r in range(batch):
                    for c in range(dout):
                        z = hn[r * dout + c] + w[dout * din + c]
                        if i < L - 1 and z <= 0:
                            z = slope * z
                        hn[r * dout + c] = z
            # mixture head: loss and gradient of the mean loss
            loss = 0.0
            for r in range(batch):
                ll = _row_logs(raw, yb, r, G, p, sigma_floor, la, lc, sg, sq)
                loss -= ll
                for k in range(G):
                    gam = exp(lc[k] - ll)
                    iv = 1.0 / (sg[k] * sg[k])
                    g[r * dim[L] + k] = (exp(la[k]) - gam) * inv_m
                    for c in range(p):
                        g[r * dim[L] + G + k * p + c] = -gam * iv * (yb[r, c] - raw[r, G + k * p + c]) * inv_m
                    g[r * dim[L] + G + G * p + k] = gam * (p / sg[k] - sq[k] * iv / sg[k]) * sigmoid(raw[r, G + G * p + k]) * inv_m
            if not isfinite(loss):
                status = 1
                break
            total += loss
            # backward
            for i in range(L - 1, -1, -1):
                din = dim[i]
                dout = dim[i + 1]
                h = &hbuf[h_off[i]]
                w = &flat[w_off[i]]
                rm_gemm(b'T', b'N', dout, din, batch, g, dout, h, din, &grad[w_off[i]], din)
                for c in range(dout):
                    acc = 0.0
                    for r in range(batch):
                        acc += g[r * dout + c]
                    grad[w_off[i] + dout * din + c] = acc
                if i > 0:
                    rm_gemm(b'N', b'N', batch, din, dout, g, dout, w, din, gn, din)
                    for j in range(batch * din):
                        if h[j] <= 0:
                            gn[j] = slope * gn[j]
                    tmp = g
                    g = gn
                    gn = tmp
            for j in range(n_params):
                if not isfinite(grad[j]):
                    status = 2
                    break
            if status:
                break
            # Adam
            step += 1
            lr_t = lr * sqrt(1.0 - pow(beta2, step)) / (1.0 - pow(beta1, step))
            eps_t = eps * sqrt(1.0 - pow(beta2, step))
            for j in range(n_params):
                m1[j] = beta1 * m1[j] + (1.0 - beta1) * grad[j]
                m2[j] = beta2 * m2[j] + (1.0 - beta2) * grad[j] * grad[j]
                flat[j] -= lr_t * m1[j] / (sqrt(m2[j]) + eps_t)
    return total, step, status
