# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled orbit kernel.

Semantics match :mod:`asipdyn._kernels_py` bit for bit: ``out[r, t]`` is the
current point, after which the point is advanced by one step of the map.
"""
from libc.math cimport pow
from libc.stdint cimport uint64_t
cimport cython

cdef double REFRESH = 1.1102230246251565e-16   # 2**-53
cdef double FLOOR = 5e-324


cdef inline uint64_t _splitmix(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _step(int code, double x, const double[::1] p, int nb, double c) noexcept nogil:
    cdef int k
    if code == 0:
        if x < 0.5:
            return 2.0 * x
        return 2.0 * x - 1.0
    elif code == 1:
        if x < 0.5:
            return 2.0 * x
        return 2.0 - 2.0 * x
    elif code == 2:
        k = nb - 1
        while k > 0 and x < p[k]:
            k -= 1
        return p[nb + 1 + k] * (x - p[k])
    else:
        if x < 0.5:
            return x * (1.0 + c * pow(x, p[0]))
        return 2.0 * x - 1.0


def orbit_block(int code, const double[::1] params, double[::1] x, uint64_t[::1] rng,
                double[:, ::1] out, bint refresh):
    """Fill ``out`` (R x L) with orbit points and advance ``x`` and ``rng`` in place."""
    cdef Py_ssize_t R = out.shape[0]
    cdef Py_ssize_t L = out.shape[1]
    cdef Py_ssize_t r, t
    cdef double xi, c = 0.0
    cdef int nb = 0
    cdef uint64_t z
    if code == 2:
        nb = (params.shape[0] - 1) // 2
    if code == 3:
        c = pow(2.0, params[0])
    with nogil:
        for r in range(R):
            xi = x[r]
            for t in range(L):
                if code == 3 and xi < FLOOR:
                    xi = FLOOR
                out[r, t] = xi
                xi = _step(code, xi, params, nb, c)
                if refresh:
                    z = _splitmix(&rng[r])
                    if z >> 63:
                        xi = xi + REFRESH
                if xi > 1.0:
                    xi = 1.0
                elif xi < 0.0:
                    xi = 0.0
            x[r] = xi
