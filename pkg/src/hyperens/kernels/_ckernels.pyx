# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled direct-loop versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


cdef void _im2col(double[:, :, :, ::1] x, Py_ssize_t l, Py_ssize_t stride,
                  Py_ssize_t hout, Py_ssize_t wout, double[:, ::1] cols) noexcept nogil:
    # row (n, h, w) holds the patch flattened as (i, j, c), matching kernel.reshape(-1, co)
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[3]
    cdef Py_ssize_t n, h, w, i, j, c, row = 0, k
    cdef double *dst
    cdef double *src
    for n in range(b):
        for h in range(hout):
            for w in range(wout):
                dst = &cols[row, 0]
                k = 0
                for i in range(l):
                    for j in range(l):
                        src = &x[n, h * stride + i, w * stride + j, 0]
                        for c in range(ci):
                            dst[k + c] = src[c]
                        k += ci
                row += 1


def _out_size(Py_ssize_t n_in, Py_ssize_t l, Py_ssize_t stride):
    return (n_in - l) // stride + 1


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] kernel, int stride=1):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[3]
    cdef Py_ssize_t l = kernel.shape[0], co = kernel.shape[3]
    cdef Py_ssize_t hout = _out_size(x.shape[1], l, stride), wout = _out_size(x.shape[2], l, stride)
    cols = np.empty((b * hout * wout, l * l * ci), dtype=np.float64)
    cdef double[:, ::1] cols_view = cols
    with nogil:
        _im2col(x, l, stride, hout, wout, cols_view)
    out = cols @ np.asarray(kernel).reshape(l * l * ci, co)
    return out.reshape(b, hout, wout, co)


def conv2d_backward_kernel(double[:, :, :, ::1] x, double[:, :, :, ::1] grad_out,
                           int size, int stride=1):
    cdef Py_ssize_t b = x.shape[0], ci = x.shape[3]
    cdef Py_ssize_t hout = grad_out.shape[1], wout = grad_out.shape[2], co = grad_out.shape[3]
    cdef Py_ssize_t l = size
    cols = np.empty((b * hout * wout, l * l * ci), dtype=np.float64)
    cdef double[:, ::1] cols_view = cols
    with nogil:
        _im2col(x, l, stride, hout, wout, cols_view)
    gk = cols.T @ np.asarray(grad_out).reshape(b * hout * wout, co)
    return gk.reshape(l, l, ci, co)


def conv2d_backward_input(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] kernel,
                          tuple input_shape, int stride=1):
    cdef Py_ssize_t b = grad_out.shape[0], hout = grad_out.shape[1]
    cdef Py_ssize_t wout = grad_out.shape[2], co = grad_out.shape[3]
    cdef Py_ssize_t l = kernel.shape[0], ci = kernel.shape[2]
    gx_arr = np.zeros(input_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    dcols_arr = np.ascontiguousarray(
        np.asarray(grad_out).reshape(b * hout * wout, co) @ np.asarray(kernel).reshape(l * l * ci, co).T)
    cdef double[:, ::1] dcols = dcols_arr
    cdef Py_ssize_t n, h, w, i, j, c, row = 0, k
    cdef double *dst
    cdef double *src
    with nogil:
        for n in range(b):
            for h in range(hout):
                for w in range(wout):
                    src = &dcols[row, 0]
                    k = 0
                    for i in range(l):
                        for j in range(l):
                            dst = &gx[n, h * stride + i, w * stride + j, 0]
                            for c in range(ci):
                                dst[c] += src[k + c]
                            k += ci
                    row += 1
    return gx_arr


def greedy_scores(double[:, ::1] true_probs, double[::1] running_sum, double count,
                  double floor=1e-12):
    cdef Py_ssize_t m = true_probs.shape[0], n = true_probs.shape[1]
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t j, i
    cdef double acc, p, denom = count + 1.0
    for j in range(m):
        acc = 0.0
        for i in range(n):
            p = (running_sum[i] + true_probs[j, i]) / denom
            if p < floor:
                p = floor
            acc += log(p)
        out[j] = -acc / n
    return out_arr
