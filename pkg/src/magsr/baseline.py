"""Interpolation baselines: upsample the 4x4 z-axis taxel grid to image size.

Taxel centres are mapped onto the image corner pixels (corner-aligned), so
output pixel ``j`` of ``W`` samples grid coordinate ``j * (n - 1) / (W - 1)``.
"""
import numpy as np


def _coords(n_grid, n_out):
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_grid - 1) / (n_out - 1))


def _linear_matrix(n_grid, n_out):
    u = _coords(n_grid, n_out)
    i0 = np.clip(np.floor(u).astype(int), 0, n_grid - 2)
    f = u - i0
    m = np.zeros((n_out, n_grid))
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - f
    m[rows, i0 + 1] += f
    return m


def catmull_rom_weights(t, a=-0.5):
    """Cubic convolution weights for taps at offsets -1, 0, 1, 2 from the left node."""
    t = np.asarray(t, dtype=np.float64)

    def k(x):
        x = np.abs(x)
        return np.where(
            x <= 1,
            (a + 2) * x**3 - (a + 3) * x**2 + 1,
            np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
        )

    return np.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], axis=-1)


def _cubic_matrix(n_grid, n_out, a=-0.5):
    u = _coords(n_grid, n_out)
    i0 = np.clip(np.floor(u).astype(int), 0, n_grid - 2)
    w = catmull_rom_weights(u - i0, a)
    m = np.zeros((n_out, n_grid))
    for tap, off in enumerate((-1, 0, 1, 2)):
        # edge clamping: out-of-range taps reuse the border node
        idx = np.clip(i0 + off, 0, n_grid - 1)
        np.add.at(m, (np.arange(n_out), idx), w[:, tap])
    return m


def bilinear_upsample(grid, height, width=None):
    """Corner-aligned bilinear interpolation of a 2-D grid (no rescaling)."""
    width = height if width is None else width
    g = np.asarray(grid, dtype=np.float64)
    return _linear_matrix(g.shape[0], height) @ g @ _linear_matrix(g.shape[1], width).T


def bicubic_upsample(grid, height, width=None, a=-0.5):
    """Corner-aligned Catmull-Rom interpolation with clamped edges (no rescaling; may overshoot)."""
    width = height if width is None else width
    g = np.asarray(grid, dtype=np.float64)
    return _cubic_matrix(g.shape[0], height, a) @ g @ _cubic_matrix(g.shape[1], width, a).T


def to_unit_range(field):
    """Affine map from normalised flux [-1, 1] to [0, 1], clipped."""
    return np.clip((np.asarray(field) + 1.0) / 2.0, 0.0, 1.0)


def z_grid(mag_raw):
    from .ingest import clamp_normalize

    return clamp_normalize(np.asarray(mag_raw).reshape(4, 4, 3))[..., 2]


METHODS = {"bilinear": bilinear_upsample, "bicubic": bicubic_upsample}


def reconstruct_baseline(mag_raw, size, method="bilinear"):
    """Depth-image-shaped baseline reconstruction in [0, 1] from one raw reading."""
    try:
        up = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown baseline method {method!r}") from None
    return to_unit_range(up(z_grid(mag_raw), size, size))
