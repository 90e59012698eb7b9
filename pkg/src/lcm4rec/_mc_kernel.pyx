# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Monte-Carlo likelihood kernel.

Same contract as ``_mc_numpy.mc_loss_grad``: per-observation corrected NLL,
per-sample probabilities and gradients of the summed loss.  Loops run one
observation at a time so memory stays O(K S C) and the GIL is released.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline double _sigmoid(double z) noexcept nogil:
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    cdef double e = exp(z)
    return e / (1.0 + e)


cdef inline double _kernel_cdf(double y, const double[::1] w, const double[::1] h,
                               const double[::1] x, Py_ssize_t K) noexcept nogil:
    cdef double F = 0.0
    cdef Py_ssize_t m
    for m in range(K):
        F += w[m] * _sigmoid((y - x[m]) / h[m])
    return F


def mc_probs(const double[:, ::1] delta, const double[:, :, ::1] z,
             const double[::1] w, const double[::1] h, const double[::1] x):
    cdef Py_ssize_t N = delta.shape[0], Cm = delta.shape[1]
    cdef Py_ssize_t K = z.shape[1], S = z.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] P_arr = np.zeros((N, S))
    cdef double[:, ::1] P = P_arr
    cdef Py_ssize_t n, k, s, j
    cdef double e, G
    with nogil:
        for n in range(N):
            for k in range(K):
                for s in range(S):
                    e = x[k] + h[k] * z[n, k, s]
                    G = 1.0
                    for j in range(Cm):
                        G *= _kernel_cdf(delta[n, j] + e, w, h, x, K)
                    P[n, s] += w[k] * G
    return P_arr


def mc_loss_grad(const double[:, ::1] delta, const double[:, :, ::1] z,
                 const double[::1] w, const double[::1] h, const double[::1] x,
                 double floor=1e-12, double sign=-1.0):
    cdef Py_ssize_t N = delta.shape[0], Cm = delta.shape[1]
    cdef Py_ssize_t K = z.shape[1], S = z.shape[2]
    if S < 3:
        raise ValueError(f"the corrected likelihood needs S >= 3 samples, got S={S}")

    loss_arr = np.zeros(N)
    P_arr = np.zeros((N, S))
    g_delta_arr = np.zeros((N, Cm))
    g_w_arr = np.zeros(K)
    g_h_arr = np.zeros(K)
    g_x_arr = np.zeros(K)
    Fbuf_arr = np.empty((K, S, max(Cm, 1)))
    Gbuf_arr = np.empty((K, S))
    dP_arr = np.empty(S)

    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] P = P_arr
    cdef double[:, ::1] g_delta = g_delta_arr
    cdef double[::1] g_w = g_w_arr
    cdef double[::1] g_h = g_h_arr
    cdef double[::1] g_x = g_x_arr
    cdef double[:, :, ::1] Fbuf = Fbuf_arr
    cdef double[:, ::1] Gbuf = Gbuf_arr
    cdef double[::1] dP = dP_arr

    cdef Py_ssize_t n, k, s, j, jj, m
    cdef double e, G, F, Pbar, Pb, d, M2, M3, c2, c3, loo, gF, zz, sg, wd, fsum, q
    cdef double dS = <double>S
    cdef int n_floored = 0
    c2 = sign / (2.0 * dS * (dS - 1.0))
    c3 = sign / (3.0 * dS * (dS - 1.0) * (dS - 2.0))

    with nogil:
        for n in range(N):
            # pass 1: per-sample probabilities
            for s in range(S):
                P[n, s] = 0.0
            for k in range(K):
                for s in range(S):
                    e = x[k] + h[k] * z[n, k, s]
                    G = 1.0
                    for j in range(Cm):
                        F = _kernel_cdf(delta[n, j] + e, w, h, x, K)
                        Fbuf[k, s, j] = F
                        G *= F
                    Gbuf[k, s] = G
                    P[n, s] += w[k] * G

            # corrected loss and dL/dP_s
            Pbar = 0.0
            for s in range(S):
                Pbar += P[n, s]
            Pbar /= dS
            M2 = 0.0
            M3 = 0.0
            for s in range(S):
                d = P[n, s] - Pbar
                M2 += d * d
                M3 += d * d * d
            if Pbar < floor:
                n_floored += 1
                Pb = floor
                loss[n] = -log(Pb) + c2 * M2 / (Pb * Pb) - c3 * M3 / (Pb * Pb * Pb)
                continue
            Pb = Pbar
            loss[n] = -log(Pb) + c2 * M2 / (Pb * Pb) - c3 * M3 / (Pb * Pb * Pb)
            for s in range(S):
                d = P[n, s] - Pbar
                dP[s] = (-1.0 / (dS * Pb)
                         + c2 * (2.0 * d / (Pb * Pb) - 2.0 * M2 / (dS * Pb * Pb * Pb))
                         - c3 * ((3.0 * d * d - 3.0 * M2 / dS) / (Pb * Pb * Pb)
                                 - 3.0 * M3 / (dS * Pb * Pb * Pb * Pb)))

            # pass 2: chain rule through the kernel cdf and the draws
            for k in range(K):
                for s in range(S):
                    g_w[k] += dP[s] * Gbuf[k, s]
                    e = x[k] + h[k] * z[n, k, s]
                    for j in range(Cm):
                        loo = 1.0
                        for jj in range(Cm):
                            if jj != j:
                                loo *= Fbuf[k, s, jj]
                        gF = dP[s] * w[k] * loo
                        fsum = 0.0
                        for m in range(K):
                            zz = (delta[n, j] + e - x[m]) / h[m]
                            sg = _sigmoid(zz)
                            wd = sg * (1.0 - sg) * w[m] / h[m]
                            g_w[m] += gF * sg
                            g_x[m] -= gF * wd
                            g_h[m] -= gF * wd * zz
                            fsum += wd
                        q = gF * fsum
                        g_delta[n, j] += q
                        g_x[k] += q
                        g_h[k] += q * z[n, k, s]

    if n_floored:
        import logging
        logging.getLogger("lcm4rec._mc_common").warning(
            "%d choice probabilities below %.0e were floored", n_floored, floor)
    return loss_arr, P_arr, g_delta_arr, g_w_arr, g_h_arr, g_x_arr
