"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``MAGSR_PURE_PYTHON=1`` is set.
"""
import numpy as np


def _make_crc_table(poly=0x1021):
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ poly) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
        table.append(crc)
    return tuple(table)


CRC_TABLE = _make_crc_table()


def crc16_ccitt(data, init=0xFFFF):
    """CRC-16/CCITT-FALSE (poly 0x1021, no reflection, no xor-out)."""
    crc = init
    table = CRC_TABLE
    for b in bytes(data):
        crc = ((crc << 8) & 0xFFFF) ^ table[((crc >> 8) ^ b) & 0xFF]
    return crc


def dipole_field(sources, moments, sensors):
    """Field of z-oriented point dipoles summed at each sensor.

    Parameters
    ----------
    sources : (N, 3) array of dipole positions
    moments : (N,) array of z-moments
    sensors : (M, 3) array of sensor positions

    Returns
    -------
    (M, 3) array ``sum_n (3 r_hat (m . r_hat) - m) / |r|^3``.
    """
    sources = np.asarray(sources, dtype=np.float64)
    moments = np.asarray(moments, dtype=np.float64)
    sensors = np.asarray(sensors, dtype=np.float64)
    out = np.empty((sensors.shape[0], 3))
    for i, s in enumerate(sensors):
        r = s[None, :] - sources
        r2 = np.einsum("ij,ij->i", r, r)
        inv_r = 1.0 / np.sqrt(r2)
        inv_r3 = inv_r / r2
        inv_r5 = inv_r3 / r2
        mdotr = moments * r[:, 2]
        bx = 3.0 * mdotr * r[:, 0] * inv_r5
        by = 3.0 * mdotr * r[:, 1] * inv_r5
        bz = 3.0 * mdotr * r[:, 2] * inv_r5 - moments * inv_r3
        out[i, 0] = bx.sum()
        out[i, 1] = by.sum()
        out[i, 2] = bz.sum()
    return out
