# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled one-sided Jacobi sweeps.

Operates on ``cols`` (d x m, row j = column j of the matrix being
orthogonalised) and ``vcols`` (d x d, row j = column j of V) in place.
Pair order is cyclic by rows: (0,1), (0,2), ..., (d-2,d-1). Columns whose
squared norm is at most ``floor`` are treated as zero and never rotated;
otherwise a roundoff-sized remnant of a dependent column can stay parallel
to its partner forever.
Must stay numerically in step with ``_jacobi_py.jacobi_sweeps``.
"""

from libc.math cimport sqrt, fabs


def jacobi_sweeps(double[:, ::1] cols, double[:, ::1] vcols, double tol, int max_sweeps, double floor=0.0):
    cdef Py_ssize_t d = cols.shape[0]
    cdef Py_ssize_t m = cols.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y, rel, off
    cdef int sweep = 0
    cdef bint rotated = True

    off = 0.0
    with nogil:
        while rotated and sweep < max_sweeps:
            rotated = False
            off = 0.0
            sweep += 1
            for p in range(d - 1):
                for q in range(p + 1, d):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        x = cols[p, i]
                        y = cols[q, i]
                        alpha += x * x
                        beta += y * y
                        gamma += x * y
                    if gamma == 0.0 or alpha <= floor or beta <= floor:
                        continue
                    rel = fabs(gamma) / sqrt(alpha * beta)
                    if rel > off:
                        off = rel
                    if rel <= tol:
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                    else:
                        t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = c * t
                    for i in range(m):
                        x = cols[p, i]
                        y = cols[q, i]
                        cols[p, i] = c * x - s * y
                        cols[q, i] = s * x + c * y
                    for i in range(d):
                        x = vcols[p, i]
                        y = vcols[q, i]
                        vcols[p, i] = c * x - s * y
                        vcols[q, i] = s * x + c * y
    return sweep, not rotated, off
