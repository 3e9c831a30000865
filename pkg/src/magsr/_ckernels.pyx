# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``_kernels_py``."""
import numpy as np
from libc.math cimport sqrt

cdef unsigned short CRC_TABLE[256]


cdef void _init_table():
    cdef int byte, k
    cdef unsigned int crc
    for byte in range(256):
        crc = byte << 8
        for k in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ 0x1021) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
        CRC_TABLE[byte] = <unsigned short>crc


_init_table()


def crc16_ccitt(const unsigned char[::1] data, unsigned int init=0xFFFF):
    cdef unsigned int crc = init
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            crc = ((crc << 8) & 0xFFFF) ^ CRC_TABLE[((crc >> 8) ^ data[i]) & 0xFF]
    return crc


def dipole_field(sources, moments, sensors):
    cdef double[:, ::1] src = np.ascontiguousarray(sources, dtype=np.float64)
    cdef double[::1] mom = np.ascontiguousarray(moments, dtype=np.float64)
    cdef double[:, ::1] sen = np.ascontiguousarray(sensors, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0], m = sen.shape[0], i, j
    out = np.zeros((m, 3))
    cdef double[:, ::1] o = out
    cdef double rx, ry, rz, r2, inv_r, inv_r3, inv_r5, mdotr, bx, by, bz
    with nogil:
        for i in range(m):
            bx = 0.0
            by = 0.0
            bz = 0.0
            for j in range(n):
                rx = sen[i, 0] - src[j, 0]
                ry = sen[i, 1] - src[j, 1]
                rz = sen[i, 2] - src[j, 2]
                r2 = rx * rx + ry * ry + rz * rz
                inv_r = 1.0 / sqrt(r2)
                inv_r3 = inv_r / r2
                inv_r5 = inv_r3 / r2
                mdotr = mom[j] * rz
                bx = bx + 3.0 * mdotr * rx * inv_r5
                by = by + 3.0 * mdotr * ry * inv_r5
                bz = bz + 3.0 * mdotr * rz * inv_r5 - mom[j] * inv_r3
            o[i, 0] = bx
            o[i, 1] = by
            o[i, 2] = bz
    return out
