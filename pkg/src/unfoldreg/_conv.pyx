# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 2-D 'same' convolution kernels (cross-correlation, zero padding).

Array layout is NCHW for activations and (out, in, kh, kw) for weights, all
C-contiguous float64. Each kernel lowers the convolution to an im2col buffer
and a single dgemm per sample; the sample loop runs in a fixed order so
results are reproducible run to run.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef void _im2col(const double* img, double* cols, Py_ssize_t C, Py_ssize_t H,
                  Py_ssize_t W, Py_ssize_t KH, Py_ssize_t KW) noexcept nogil:
    # cols[(c, p, q), (i, j)] = img[c, i + p - ph, j + q - pw], zero outside
    cdef Py_ssize_t ph = KH // 2, pw = KW // 2, HW = H * W
    cdef Py_ssize_t c, p, q, i, j, di, dj, i0, i1, j0, j1
    cdef double* row
    cdef const double* src
    for c in range(C):
        for p in range(KH):
            di = p - ph
            i0 = _imax(0, -di)
            i1 = _imin(H, H - di)
            for q in range(KW):
                dj = q - pw
                j0 = _imax(0, -dj)
                j1 = _imin(W, W - dj)
                row = cols + ((c * KH + p) * KW + q) * HW
                for i in range(HW):
                    row[i] = 0.0
                for i in range(i0, i1):
                    src = img + c * HW + (i + di) * W + dj
                    for j in range(j0, j1):
                        row[i * W + j] = src[j]


cdef void _col2im(const double* cols, double* img, Py_ssize_t C, Py_ssize_t H,
                  Py_ssize_t W, Py_ssize_t KH, Py_ssize_t KW) noexcept nogil:
    # adjoint of _im2col: img[c, i + di, j + dj] += cols[(c, p, q), (i, j)]
    cdef Py_ssize_t ph = KH // 2, pw = KW // 2, HW = H * W
    cdef Py_ssize_t c, p, q, i, j, di, dj, i0, i1, j0, j1
    cdef const double* row
    cdef double* dst
    for c in range(C):
        for p in range(KH):
            di = p - ph
            i0 = _imax(0, -di)
            i1 = _imin(H, H - di)
            for q in range(KW):
                dj = q - pw
                j0 = _imax(0, -dj)
                j1 = _imin(W, W - dj)
                row = cols + ((c * KH + p) * KW + q) * HW
                for i in range(i0, i1):
                    dst = img + c * HW + (i + di) * W + dj
                    for j in range(j0, j1):
                        dst[j] += row[i * W + j]


cdef void _gemm_rm(char ta, char tb, int M, int N, int K, const double* A, int lda,
                   const double* B, int ldb, double beta, double* Cm, int ldc) noexcept nogil:
    # row-major C[M, N] = op(A) @ op(B) + beta * C via column-major dgemm on the transposes
    cdef double one = 1.0
    dgemm(&tb, &ta, &N, &M, &K, &one, <double*>B, &ldb, <double*>A, &lda, &beta, Cm, &ldc)


def conv2d(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    if w.shape[1] != C:
        raise ValueError("channel mismatch: input has %d, weight expects %d" % (C, w.shape[1]))
    out = np.zeros((N, O, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef int HW = <int>(H * W), CK = <int>(C * KH * KW), Oi = <int>O
    cols_arr = np.empty((CK, HW), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n
    if N == 0 or O == 0 or HW == 0:
        return out
    with nogil:
        for n in range(N):
            _im2col(&x[n, 0, 0, 0], &cols[0, 0], C, H, W, KH, KW)
            # y[n] (O, HW) = w (O, CK) @ cols (CK, HW)
            _gemm_rm(b'N', b'N', Oi, HW, CK, &w[0, 0, 0, 0], CK, &cols[0, 0], HW,
                     0.0, &y[n, 0, 0, 0], HW)
    return out


def conv2d_grad_input(const double[:, :, :, ::1] gy, const double[:, :, :, ::1] w):
    cdef Py_ssize_t N = gy.shape[0], O = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    if w.shape[0] != O:
        raise ValueError("channel mismatch: gradient has %d, weight expects %d" % (O, w.shape[0]))
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out
    cdef int HW = <int>(H * W), CK = <int>(C * KH * KW), Oi = <int>O
    cols_arr = np.empty((CK, HW), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n
    if N == 0 or C == 0 or HW == 0:
        return out
    with nogil:
        for n in range(N):
            # cols (CK, HW) = w^T (CK, O) @ gy[n] (O, HW)
            _gemm_rm(b'T', b'N', CK, HW, Oi, &w[0, 0, 0, 0], CK, &gy[n, 0, 0, 0], HW,
                     0.0, &cols[0, 0], HW)
            _col2im(&cols[0, 0], &gx[n, 0, 0, 0], C, H, W, KH, KW)
    return out


def conv2d_grad_weight(const double[:, :, :, ::1] x, const double[:, :, :, ::1] gy,
                       Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = gy.shape[1]
    if gy.shape[0] != N or gy.shape[2] != H or gy.shape[3] != W:
        raise ValueError("gradient shape does not match input shape")
    out = np.zeros((O, C, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = out
    cdef int HW = <int>(H * W), CK = <int>(C * kh * kw), Oi = <int>O
    cols_arr = np.empty((CK, HW), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n
    if N == 0 or O == 0 or CK == 0:
        return out
    with nogil:
        for n in range(N):
            _im2col(&x[n, 0, 0, 0], &cols[0, 0], C, H, W, kh, kw)
            # gw (O, CK) += gy[n] (O, HW) @ cols^T (HW, CK)
            _gemm_rm(b'N', b'T', Oi, CK, HW, &gy[n, 0, 0, 0], HW, &cols[0, 0], HW,
                     1.0, &gw[0, 0, 0, 0], CK)
    return out
