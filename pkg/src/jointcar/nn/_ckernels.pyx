# cython: language_level=3
"""Compiled twins of the kernels in ``_pykernels``.

Same signatures, same layouts. Matrix products go through the BLAS that
scipy links against; batch accumulation runs in sample order so results
are reproducible run to run.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

BACKEND = "cython"


cdef void _gemm(char *ta, char *tb, int m, int n, int k, floating alpha,
                floating *a, int lda, floating *b, int ldb, floating beta,
                floating *c, int ldc) noexcept nogil:
    # column-major BLAS call
    if floating is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                  int fh, int fw) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] - fh + 1, ow = x.shape[3] - fw + 1
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    for n in range(B):
        for c in range(C):
            for i in range(fh):
                for j in range(fw):
                    row = (c * fh + i) * fw + j
                    for oy in range(oh):
                        for ox in range(ow):
                            cols[n, row, oy * ow + ox] = x[n, c, oy + i, ox + j]


def im2col(floating[:, :, :, ::1] x, int fh, int fw):
    dtype = np.float32 if floating is float else np.float64
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] - fh + 1, ow = x.shape[3] - fw + 1
    out = np.empty((B, C * fh * fw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    with nogil:
        _im2col(x, cols, fh, fw)
    return out


def col2im(floating[:, :, ::1] dcols, tuple x_shape, int fh, int fw):
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t B = dx.shape[0], C = dx.shape[1]
    cdef Py_ssize_t oh = dx.shape[2] - fh + 1, ow = dx.shape[3] - fw + 1
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    with nogil:
        for n in range(B):
            for c in range(C):
                for i in range(fh):
                    for j in range(fw):
                        row = (c * fh + i) * fw + j
                        for oy in range(oh):
                            for ox in range(ow):
                                dx[n, c, oy + i, ox + j] += dcols[n, row, oy * ow + ox]
    return out


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b):
    dtype = np.float32 if floating is float else np.float64
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int K = w.shape[0], fh = w.shape[2], fw = w.shape[3]
    cdef int oh = H - fh + 1, ow = W - fw + 1
    cdef int P = oh * ow, J = C * fh * fw
    cols_arr = np.empty((B, J, P), dtype=dtype)
    out_arr = np.empty((B, K, oh, ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating *outp = &out[0, 0, 0, 0]
    cdef int n, k, p
    with nogil:
        _im2col(x, cols, fh, fw)
        for n in range(B):
            for k in range(K):
                for p in range(P):
                    outp[(n * K + k) * P + p] = b[k]
            # out[n] (K x P) = w2 (K x J) @ cols[n] (J x P), row-major
            _gemm(b"N", b"N", P, K, J, <floating>1.0, &cols[n, 0, 0], P,
                  &w[0, 0, 0, 0], J, <floating>1.0, &out[n, 0, 0, 0], P)
    return out_arr, cols_arr


def conv2d_backward(floating[:, :, :, ::1] dout, floating[:, :, ::1] cols,
                    floating[:, :, :, ::1] w, tuple x_shape, bint need_input=True):
    dtype = np.float32 if floating is float else np.float64
    cdef int B = dout.shape[0], K = dout.shape[1]
    cdef int P = dout.shape[2] * dout.shape[3], J = cols.shape[1]
    cdef int fh = w.shape[2], fw = w.shape[3]
    dw_arr = np.zeros((K, w.shape[1], fh, fw), dtype=dtype)
    db_arr = np.zeros(K, dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef floating[:, :, ::1] dcols
    cdef int n, k, p
    cdef floating acc
    cdef floating *doutp = &dout[0, 0, 0, 0]
    with nogil:
        for n in range(B):
            # dw (K x J) += dout[n] (K x P) @ cols[n].T (P x J)
            _gemm(b"T", b"N", J, K, P, <floating>1.0, &cols[n, 0, 0], P,
                  &dout[n, 0, 0, 0], P, <floating>1.0, &dw[0, 0, 0, 0], J)
        for n in range(B):
            for k in range(K):
                acc = 0
                for p in range(P):
                    acc = acc + doutp[(n * K + k) * P + p]
                db[k] += acc
    dx = None
    if need_input:
        dcols_arr = np.empty((B, J, P), dtype=dtype)
        dcols = dcols_arr
        with nogil:
            for n in range(B):
                # dcols[n] (J x P) = w2.T (J x K) @ dout[n] (K x P)
                _gemm(b"N", b"T", P, J, K, <floating>1.0, &dout[n, 0, 0, 0], P,
                      &w[0, 0, 0, 0], J, <floating>0.0, &dcols[n, 0, 0], P)
        dx = col2im(dcols_arr, x_shape, fh, fw)
    return dw_arr, db_arr, dx


def tanh_avgpool_forward(floating[:, :, :, ::1] z, int size):
    dtype = np.float32 if floating is float else np.float64
    cdef Py_ssize_t B = z.shape[0], K = z.shape[1], H = z.shape[2], W = z.shape[3]
    cdef Py_ssize_t ph = H // size, pw = W // size
    # numpy's vectorized tanh beats scalar libm calls by a wide margin
    act_arr = np.tanh(np.asarray(z))
    pooled_arr = np.zeros((B, K, ph, pw), dtype=dtype)
    cdef floating[:, :, :, ::1] act = act_arr
    cdef floating[:, :, :, ::1] pooled = pooled_arr
    cdef Py_ssize_t n, k, y, x, py, px, i
    cdef floating inv = <floating>1.0 / (size * size)
    cdef floating acc
    with nogil:
        for n in range(B):
            for k in range(K):
                for py in range(ph):
                    for i in range(size):
                        y = py * size + i
                        for px in range(pw):
                            acc = 0
                            for x in range(px * size, px * size + size):
                                acc = acc + act[n, k, y, x]
                            pooled[n, k, py, px] += acc
                for py in range(ph):
                    for px in range(pw):
                        pooled[n, k, py, px] *= inv
    return pooled_arr, act_arr


def tanh_avgpool_backward(floating[:, :, :, ::1] dpooled,
                          floating[:, :, :, ::1] act, int size):
    dtype = np.float32 if floating is float else np.float64
    cdef Py_ssize_t B = act.shape[0], K = act.shape[1], H = act.shape[2], W = act.shape[3]
    cdef Py_ssize_t ph = dpooled.shape[2], pw = dpooled.shape[3]
    dz_arr = np.zeros((B, K, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dz = dz_arr
    cdef Py_ssize_t n, k, y, x, py, px, i
    cdef floating inv = <floating>1.0 / (size * size)
    cdef floating a, g
    with nogil:
        for n in range(B):
            for k in range(K):
                for py in range(ph):
                    for i in range(size):
                        y = py * size + i
                        for px in range(pw):
                            g = dpooled[n, k, py, px] * inv
                            for x in range(px * size, px * size + size):
                                a = act[n, k, y, x]
                                dz[n, k, y, x] = g * (1 - a * a)
    return dz_arr


def deform_argmax(floating[:, :, ::1] m, coeffs, long ax, long ay):
    dtype = np.float32 if floating is float else np.float64
    cdef Py_ssize_t B = m.shape[0], h = m.shape[1], w = m.shape[2]
    cdef floating c1 = coeffs[0], c2 = coeffs[1], c3 = coeffs[2], c4 = coeffs[3]
    scores_arr = np.empty(B, dtype=dtype)
    locs_arr = np.empty((B, 2), dtype=np.int64)
    cdef floating[::1] scores = scores_arr
    cdef long long[:, ::1] locs = locs_arr
    cdef Py_ssize_t n, x, y, bx, by
    cdef floating v, best, dx, dy
    with nogil:
        for n in range(B):
            bx = 0
            by = 0
            best = 0
            for x in range(h):
                dx = <floating>(x - ax)
                for y in range(w):
                    dy = <floating>(y - ay)
                    v = m[n, x, y] + c1 * (dx * dx)
                    v = v + c2 * (dy * dy)
                    v = v + c3 * dx
                    v = v + c4 * dy
                    if (x == 0 and y == 0) or v > best:
                        best = v
                        bx = x
                        by = y
            scores[n] = best
            locs[n, 0] = bx
            locs[n, 1] = by
    return scores_arr, locs_arr
