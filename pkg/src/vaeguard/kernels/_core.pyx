# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled decoder potential and leapfrog loop.

Same contract as ``_fallback``.  Matrix products go straight to BLAS through
scipy's Cython bindings; the elementwise passes live in ``_vecmath.h`` so the
C compiler can vectorise them, including the transcendental calls.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

cdef extern from "_vecmath.h" nogil:
    void vg_bias_tanh(double* h, const double* b, long rows, long n)
    void vg_bias(double* h, const double* b, long rows, long n)
    void vg_tanh_backprop(double* g, const double* h, long count)
    void vg_bernoulli(const double* a, const double* x, double* delta, double* ll,
                      long rows, long n, double eps)
    void vg_gaussian(const double* a, const double* x, double* delta, double* ll,
                     long rows, long n, double log_2pi)

cdef double LOG_2PI = 1.8378770664093453
cdef double PROB_EPS = 1e-7


cdef inline void _mm(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C, bint trans_b) noexcept nogil:
    # Row-major C = A @ B (or A @ B.T) expressed as the column-major C.T = B.T @ A.T
    cdef int m = A.shape[0], k = A.shape[1]
    cdef int n = B.shape[0] if trans_b else B.shape[1]
    cdef int ldb = B.shape[1]
    cdef char* tb = b"T" if trans_b else b"N"
    cdef char* ta = b"N"
    cdef double one = 1.0, zero = 0.0
    dgemm(tb, ta, &n, &m, &k, &one, &B[0, 0], &ldb, &A[0, 0], &k, &zero, &C[0, 0], &n)


cdef class DecoderWork:
    """Weights plus preallocated activation buffers for one batch size."""

    cdef list Ws, bs, hs, gs
    cdef int nl, B, d, D, family
    cdef double[:, ::1] delta
    cdef double[::1] ll

    def __init__(self, weights, biases, int batch, int family):
        self.Ws = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.bs = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.nl = len(self.Ws)
        self.B = batch
        self.d = self.Ws[0].shape[0]
        self.D = self.Ws[self.nl - 1].shape[1]
        self.family = family
        self.hs = [np.empty((batch, w.shape[1])) for w in self.Ws]
        self.gs = [np.empty((batch, w.shape[0])) for w in self.Ws]
        self.delta = np.empty((batch, self.D))
        self.ll = np.empty(batch)

    cdef void potential(self, double[:, ::1] z, const double[:, ::1] x,
                        double[::1] energy, double[:, ::1] grad):
        cdef int l, i, j
        cdef double[:, ::1] W, H, inp, G, Hprev
        cdef double[::1] bias
        cdef double zz

        inp = z
        for l in range(self.nl):
            W = self.Ws[l]
            bias = self.bs[l]
            H = self.hs[l]
            _mm(inp, W, H, False)
            if l < self.nl - 1:
                vg_bias_tanh(&H[0, 0], &bias[0], self.B, H.shape[1])
            else:
                vg_bias(&H[0, 0], &bias[0], self.B, H.shape[1])
            inp = H

        if self.family == 0:
            vg_bernoulli(&H[0, 0], &x[0, 0], &self.delta[0, 0], &self.ll[0],
                         self.B, self.D, PROB_EPS)
        else:
            vg_gaussian(&H[0, 0], &x[0, 0], &self.delta[0, 0], &self.ll[0],
                        self.B, self.D, LOG_2PI)
        for i in range(self.B):
            zz = 0.0
            for j in range(self.d):
                zz += z[i, j] * z[i, j]
            energy[i] = -self.ll[i] + 0.5 * zz + 0.5 * self.d * LOG_2PI

        inp = self.delta
        for l in range(self.nl - 1, -1, -1):
            W = self.Ws[l]
            G = self.gs[l]
            _mm(inp, W, G, True)
            if l > 0:
                Hprev = self.hs[l - 1]
                vg_tanh_backprop(&G[0, 0], &Hprev[0, 0], <long>G.shape[0] * G.shape[1])
            inp = G
        for i in range(self.B):
            for j in range(self.d):
                grad[i, j] = inp[i, j] + z[i, j]


def decoder_potential(z, x, weights, biases, int family):
    z = np.array(z, dtype=np.float64, order="C", copy=True)
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef int B = z.shape[0]
    work = DecoderWork(weights, biases, B, family)
    energy = np.empty(B)
    grad = np.empty_like(z)
    (<DecoderWork>work).potential(z, x, energy, grad)
    return energy, grad


def leapfrog(z, p, grad, x, weights, biases, int family, eta, int n_steps):
    cdef double[:, ::1] zv = np.array(z, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] pv = np.array(p, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] gv = np.array(grad, dtype=np.float64, order="C", copy=True)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] ev = np.ascontiguousarray(eta, dtype=np.float64)
    cdef int B = zv.shape[0], d = zv.shape[1]
    cdef double[::1] energy = np.empty(B)
    cdef DecoderWork work = DecoderWork(weights, biases, B, family)
    cdef int s, i, j
    cdef double h
    for s in range(n_steps):
        for i in range(B):
            h = 0.5 * ev[i]
            for j in range(d):
                pv[i, j] -= h * gv[i, j]
                zv[i, j] += ev[i] * pv[i, j]
        work.potential(zv, xv, energy, gv)
        for i in range(B):
            h = 0.5 * ev[i]
            for j in range(d):
                pv[i, j] -= h * gv[i, j]
    if n_steps == 0:
        work.potential(zv, xv, energy, gv)
    return np.asarray(zv), np.asarray(pv), np.asarray(energy), np.asarray(gv)
