# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward-recursion kernels; mirror of _fwdpy."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def forward(double[:, ::1] P, double[:, :, ::1] Gam, double[::1] delta):
    cdef Py_ssize_t T = P.shape[0]
    cdef Py_ssize_t N = P.shape[1]
    phi_arr = np.empty((T, N))
    c_arr = np.empty(T)
    cdef double[:, ::1] phi = phi_arr
    cdef double[::1] c = c_arr
    cdef double[::1] u = np.empty(N)
    cdef Py_ssize_t t, i, j
    cdef double ct, s, ll = 0.0

    for i in range(N):
        u[i] = delta[i] * P[0, i]
    for t in range(T):
        if t > 0:
            for j in range(N):
                s = 0.0
                for i in range(N):
                    s += phi[t - 1, i] * Gam[t, i, j]
                u[j] = s * P[t, j]
        ct = 0.0
        for i in range(N):
            ct += u[i]
        if not ct > 0.0:
            raise FloatingPointError(
                f"forward variable underflowed to zero at t={t}"
            )
        c[t] = ct
        for i in range(N):
            phi[t, i] = u[i] / ct
    ll = float(np.log(c_arr).sum())
    return ll, phi_arr, c_arr


def backward(double[:, ::1] P, double[:, :, ::1] Gam, double[::1] delta,
             double[:, ::1] phi, double[::1] c):
    cdef Py_ssize_t T = P.shape[0]
    cdef Py_ssize_t N = P.shape[1]
    Pbar_arr = np.zeros((T, N))
    Gambar_arr = np.zeros((T, N, N))
    deltabar_arr = np.zeros(N)
    cdef double[:, ::1] Pbar = Pbar_arr
    cdef double[:, :, ::1] Gambar = Gambar_arr
    cdef double[::1] deltabar = deltabar_arr
    cdef double[::1] phibar = np.zeros(N)
    cdef double[::1] ubar = np.empty(N)
    cdef double[::1] a = np.empty(N)
    cdef double[::1] abar = np.empty(N)
    cdef double[::1] newbar = np.empty(N)
    cdef Py_ssize_t t, i, j
    cdef double s

    for t in range(T - 1, 0, -1):
        s = 0.0
        for i in range(N):
            s += phibar[i] * phi[t, i]
        for i in range(N):
            ubar[i] = (1.0 + phibar[i] - s) / c[t]
        for j in range(N):
            s = 0.0
            for i in range(N):
                s += phi[t - 1, i] * Gam[t, i, j]
            a[j] = s
            Pbar[t, j] = ubar[j] * a[j]
            abar[j] = ubar[j] * P[t, j]
        for i in range(N):
            s = 0.0
            for j in range(N):
                Gambar[t, i, j] = phi[t - 1, i] * abar[j]
                s += Gam[t, i, j] * abar[j]
            newbar[i] = s
        for i in range(N):
            phibar[i] = newbar[i]
    s = 0.0
    for i in range(N):
        s += phibar[i] * phi[0, i]
    for i in range(N):
        ubar[i] = (1.0 + phibar[i] - s) / c[0]
        Pbar[0, i] = ubar[i] * delta[i]
        deltabar[i] = ubar[i] * P[0, i]
    return Pbar_arr, Gambar_arr, deltabar_arr
