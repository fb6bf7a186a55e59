# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fairness-metric kernels; see ``_pykernels`` for the reference
semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _sign(double x) nogil:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


cdef void _eval_row(const double[::1] p, const signed char[::1] a, const signed char[::1] y,
                    int kind, double w, double* value, double[::1] grad,
                    long long[::1] empty) noexcept nogil:
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    # cell index 2*a + y
    cdef double sums[4]
    cdef double cnt[4]
    cdef double coef[4]
    cdef double s0, s1, c0, c1, d, sg
    cdef int k
    for k in range(4):
        sums[k] = 0.0
        cnt[k] = 0.0
        coef[k] = 0.0
    for i in range(n):
        k = 2 * a[i] + y[i]
        sums[k] += p[i]
        cnt[k] += 1.0
    value[0] = 0.0
    if kind == 0:
        s0 = sums[0] + sums[1]
        c0 = cnt[0] + cnt[1]
        s1 = sums[2] + sums[3]
        c1 = cnt[2] + cnt[3]
        if c0 == 0:
            empty[0] += 1
        if c1 == 0:
            empty[2] += 1
        if c0 > 0 and c1 > 0:
            d = s0 / c0 - s1 / c1
            value[0] = d if d >= 0 else -d
            sg = _sign(d) * w
            coef[0] = sg / c0
            coef[1] = sg / c0
            coef[2] = -sg / c1
            coef[3] = -sg / c1
    else:
        for k in range(2):
            if kind == 1 and k == 0:
                continue
            c0 = cnt[k]
            c1 = cnt[2 + k]
            if c0 == 0:
                empty[k] += 1
            if c1 == 0:
                empty[2 + k] += 1
            if c0 > 0 and c1 > 0:
                d = sums[k] / c0 - sums[2 + k] / c1
                value[0] += d if d >= 0 else -d
                sg = _sign(d) * w
                coef[k] = sg / c0
                coef[2 + k] = -sg / c1
    if w != 0.0:
        for i in range(n):
            grad[i] += coef[2 * a[i] + y[i]]


def metric_rows(p, A, Y, int kind, weights):
    if kind < 0 or kind > 2:
        raise ValueError(f"unknown metric code {kind}")
    cdef const double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef const signed char[:, ::1] Av = np.ascontiguousarray(A, dtype=np.int8)
    cdef const signed char[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.int8)
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t S = Av.shape[0]
    cdef Py_ssize_t n = pv.shape[0]
    if Av.shape[1] != n or Yv.shape[0] != S or Yv.shape[1] != n or wv.shape[0] != S:
        raise ValueError("assignment shapes do not match predictions/weights")
    values = np.zeros(S, dtype=np.float64)
    grad = np.zeros(n, dtype=np.float64)
    empty = np.zeros(4, dtype=np.int64)
    cdef double[::1] vv = values
    cdef double[::1] gv = grad
    cdef long long[::1] ev = empty
    cdef Py_ssize_t s
    with nogil:
        for s in range(S):
            _eval_row(pv, Av[s], Yv[s], kind, wv[s], &vv[s], gv, ev)
    return values, grad, empty


def mc_rows(p, a_fixed, q_a, y_fixed, q_y, Ua, Uy, int kind):
    if kind < 0 or kind > 2:
        raise ValueError(f"unknown metric code {kind}")
    cdef const double[::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef const signed char[::1] af = np.ascontiguousarray(a_fixed, dtype=np.int8)
    cdef const signed char[::1] yf = np.ascontiguousarray(y_fixed, dtype=np.int8)
    cdef const double[::1] qa = np.ascontiguousarray(q_a, dtype=np.float64)
    cdef const double[::1] qy = np.ascontiguousarray(q_y, dtype=np.float64)
    cdef const double[:, ::1] ua = np.ascontiguousarray(Ua, dtype=np.float64)
    cdef const double[:, ::1] uy = np.ascontiguousarray(Uy, dtype=np.float64)
    cdef Py_ssize_t S = ua.shape[0]
    cdef Py_ssize_t n = pv.shape[0]
    if ua.shape[1] != n or uy.shape[0] != S or uy.shape[1] != n:
        raise ValueError("uniform draws do not match predictions")
    values = np.zeros(S, dtype=np.float64)
    grad = np.zeros(n, dtype=np.float64)
    empty = np.zeros(4, dtype=np.int64)
    arow = np.empty(n, dtype=np.int8)
    yrow = np.empty(n, dtype=np.int8)
    cdef double[::1] vv = values
    cdef double[::1] gv = grad
    cdef long long[::1] ev = empty
    cdef signed char[::1] ar = arow
    cdef signed char[::1] yr = yrow
    cdef double w = 1.0 / S if S > 0 else 0.0
    cdef Py_ssize_t s, i
    with nogil:
        for s in range(S):
            for i in range(n):
                if af[i] >= 0:
                    ar[i] = af[i]
                else:
                    ar[i] = 1 if ua[s, i] < qa[i] else 0
                if yf[i] >= 0:
                    yr[i] = yf[i]
                else:
                    yr[i] = 1 if uy[s, i] < qy[i] else 0
            _eval_row(pv, ar, yr, kind, w, &vv[s], gv, ev)
    return values, grad, empty
