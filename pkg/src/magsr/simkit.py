"""Synthetic magnetic skin: contact rasterization and magnetometer forward model.

Physical frame: millimetres, origin at the centre of the active area,
+x to the right, +y up, +z out of the skin. Images are stored row-major
with row 0 at the top (largest y), so ``np.rot90`` of an image equals the
image of the scene rotated by +90 degrees.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels

SHAPE_KINDS = ("capsule-rod", "polyline-with-thickness", "glyph-stroke-set", "disk")


class OutsideActiveAreaWarning(UserWarning):
    """The contact shape does not touch the active area; the depth image is all zero."""


@dataclass(frozen=True)
class ContactShape:
    """A 2-D indenter described as thick strokes.

    Every kind reduces to a set of polylines swept by a disc of ``radius``;
    a disk is a single one-point stroke.
    """

    name: str
    kind: str
    strokes: tuple
    radius: float

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not self.strokes or any(len(s) == 0 for s in self.strokes):
            raise ValueError("shape needs at least one non-empty stroke")

    def segments(self):
        """(S, 2, 2) array of segment endpoints; single points become zero-length segments."""
        segs = []
        for stroke in self.strokes:
            pts = [tuple(map(float, p)) for p in stroke]
            if len(pts) == 1:
                segs.append((pts[0], pts[0]))
            segs.extend(zip(pts[:-1], pts[1:]))
        return np.asarray(segs, dtype=np.float64)

    def bounds(self):
        pts = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in self.strokes])
        lo = pts.min(axis=0) - self.radius
        hi = pts.max(axis=0) + self.radius
        return lo, hi

    def sdf(self, points):
        """Signed distance (mm) of ``points`` (..., 2) in the shape's local frame."""
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 2)
        segs = self.segments()
        a = segs[:, 0, :]
        ab = segs[:, 1, :] - a
        denom = np.einsum("ij,ij->i", ab, ab)
        ap = flat[:, None, :] - a[None, :, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.einsum("pij,ij->pi", ap, ab) / denom
        t = np.where(denom > 0, np.clip(np.nan_to_num(t), 0.0, 1.0), 0.0)
        d = ap - t[..., None] * ab[None, :, :]
        dist = np.sqrt(np.einsum("pij,pij->pi", d, d)).min(axis=1)
        return (dist - self.radius).reshape(p.shape[:-1])


def capsule_rod(name, length, width):
    half = length / 2.0
    return ContactShape(name, "capsule-rod", (((-half, 0.0), (half, 0.0)),), width / 2.0)


def disk(name, radius, center=(0.0, 0.0)):
    return ContactShape(name, "disk", ((tuple(center),),), radius)


# Hex-key-like L: long arm along y, short arm along +x.
ALLEN_KEY = ContactShape(
    "allen_key",
    "polyline-with-thickness",
    (((-2.5, 7.0), (-2.5, -4.5), (4.5, -4.5)),),
    1.25,
)

# Block capital R: stem, bowl, diagonal leg.
LETTER_R = ContactShape(
    "letter_r",
    "glyph-stroke-set",
    (
        ((-3.5, -6.5), (-3.5, 6.5)),
        ((-3.5, 6.5), (1.5, 6.5), (3.5, 4.5), (3.5, 2.0), (1.5, 0.0), (-3.5, 0.0)),
        ((-0.5, 0.0), (4.0, -6.5)),
    ),
    0.9,
)

SHAPES = {
    s.name: s
    for s in (
        ALLEN_KEY,
        LETTER_R,
        capsule_rod("rod_thin", 14.0, 2.0),
        capsule_rod("rod", 14.0, 3.5),
        capsule_rod("rod_wide", 14.0, 5.0),
        disk("disk", 3.0),
    )
}
ROD_SHAPES = ("rod_thin", "rod", "rod_wide")


def get_shape(name):
    try:
        return SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; known: {', '.join(sorted(SHAPES))}") from None


@dataclass
class SkinConfig:
    active_area: float = 20.0
    skin_thickness: float = 2.5
    taxel_grid: int = 4
    taxel_pitch: float = 5.0
    sensor_plane_offset: float = 1.5
    dipole_grid: int = 40
    dipole_moment: float = 1.0
    image_size: int = 64
    raw_scale: float = 100.0
    noise_std: float = 2.0
    edge_width: float = 0.3
    press_min: float = 0.8
    press_max: float = 2.5
    shift_max: float = 2.0
    rotation_max: float = 30.0

    def __post_init__(self):
        if (self.taxel_grid - 1) * self.taxel_pitch > self.active_area:
            raise ValueError("taxel grid does not fit inside the active area")
        if self.dipole_grid < 2 * self.taxel_grid:
            raise ValueError("dipole_grid must be at least twice taxel_grid")
        if self.image_size < self.taxel_grid:
            raise ValueError("image_size must be at least taxel_grid")
        if not 0 <= self.press_min <= self.press_max <= self.skin_thickness:
            raise ValueError("press depth range must lie within [0, skin_thickness]")
        if self.edge_width <= 0:
            raise ValueError("edge_width must be positive")

    @property
    def pixel_size(self):
        return self.active_area / self.image_size

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = int(d[f.name]) if f.type == "int" else float(d[f.name])
        return cls(**kw)


@dataclass
class ContactScene:
    shape: ContactShape
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    press_depth: float = 0.0
    rng_seed: int = 0

    def validate(self, cfg: SkinConfig):
        if not 0.0 <= self.press_depth <= cfg.skin_thickness:
            raise ValueError(f"press_depth {self.press_depth} outside [0, {cfg.skin_thickness}]")
        half = cfg.active_area / 2.0
        if abs(self.tx) > half or abs(self.ty) > half:
            raise ValueError("pose places the shape centroid outside the active area")


def pixel_centers(cfg: SkinConfig):
    """(H, W, 2) physical coordinates of pixel centres."""
    n = cfg.image_size
    half = cfg.active_area / 2.0
    c = (np.arange(n) + 0.5) * cfg.pixel_size - half
    xs = np.broadcast_to(c[None, :], (n, n))
    ys = np.broadcast_to(-c[:, None], (n, n))
    return np.stack([xs, ys], axis=-1)


def _to_local(points, scene):
    t = math.radians(scene.theta)
    c, s = math.cos(t), math.sin(t)
    dx = points[..., 0] - scene.tx
    dy = points[..., 1] - scene.ty
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def smoothstep_coverage(sdf, width):
    u = np.clip(0.5 - sdf / width, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def rasterize_depth(scene: ContactScene, cfg: SkinConfig) -> np.ndarray:
    """Normalised indentation depth image (float64, H x W, values in [0, 1])."""
    scene.validate(cfg)
    local = _to_local(pixel_centers(cfg), scene)
    cover = smoothstep_coverage(scene.shape.sdf(local), cfg.edge_width)
    if not cover.any():
        warnings.warn(
            f"shape {scene.shape.name!r} lies outside the active area", OutsideActiveAreaWarning, stacklevel=2
        )
        return np.zeros((cfg.image_size, cfg.image_size))
    return np.clip(cover * (scene.press_depth / cfg.skin_thickness), 0.0, 1.0)


def taxel_positions(cfg: SkinConfig):
    """(G*G, 3) sensor positions, row-major with row 0 at the top."""
    g = cfg.taxel_grid
    off = (np.arange(g) - (g - 1) / 2.0) * cfg.taxel_pitch
    xs = np.tile(off, g)
    ys = np.repeat(-off, g)
    zs = np.full(g * g, -cfg.sensor_plane_offset)
    return np.stack([xs, ys, zs], axis=1)


def dipole_sites(cfg: SkinConfig):
    """(D*D, 2) lateral dipole positions at cell centres across the skin."""
    d = cfg.dipole_grid
    c = (np.arange(d) + 0.5) * (cfg.active_area / d) - cfg.active_area / 2.0
    xs, ys = np.meshgrid(c, c[::-1])
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def sample_depth(depth, points, cfg: SkinConfig):
    """Bilinearly sample a depth image at physical ``points`` (N, 2)."""
    half = cfg.active_area / 2.0
    col = (points[:, 0] + half) / cfg.pixel_size - 0.5
    row = (half - points[:, 1]) / cfg.pixel_size - 0.5
    return ndimage.map_coordinates(np.asarray(depth, dtype=np.float64), [row, col], order=1, mode="nearest")


def field_delta(depth, cfg: SkinConfig):
    """Noise-free, unclamped field change at the taxels, shape (G, G, 3), in raw units."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"depth shape {depth.shape} does not match image_size {cfg.image_size}")
    sites = dipole_sites(cfg)
    sensors = taxel_positions(cfg)
    moments = np.full(len(sites), cfg.dipole_moment)
    # dipoles sit on the contact surface and sink by the local indentation
    rest = np.column_stack([sites, np.full(len(sites), cfg.skin_thickness)])
    pressed = rest.copy()
    pressed[:, 2] -= sample_depth(depth, sites, cfg) * cfg.skin_thickness
    delta = kernels.dipole_field(pressed, moments, sensors) - kernels.dipole_field(rest, moments, sensors)
    g = cfg.taxel_grid
    return (delta * cfg.raw_scale).reshape(g, g, 3)


def simulate_mag(depth, cfg: SkinConfig, noise_seed=None) -> np.ndarray:
    """Raw 4x4x3 reading: scaled field change plus Gaussian noise, clamped to +-500."""
    reading = field_delta(depth, cfg)
    if cfg.noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        reading = reading + rng.normal(0.0, cfg.noise_std, size=reading.shape)
    return np.clip(reading, -500.0, 500.0)


@dataclass
class SampleMeta:
    shape_id: str
    tx: float
    ty: float
    theta: float
    press_depth: float
    seed: int


@dataclass
class Record:
    mag_raw: np.ndarray
    depth: np.ndarray
    meta: SampleMeta = field(default=None)


def draw_scene(shape, rng, cfg: SkinConfig):
    tx, ty = rng.uniform(-cfg.shift_max, cfg.shift_max, size=2)
    theta = rng.uniform(-cfg.rotation_max, cfg.rotation_max)
    press = rng.uniform(cfg.press_min, cfg.press_max)
    seed = int(rng.integers(0, 2**63 - 1))
    return ContactScene(shape, float(tx), float(ty), float(theta), float(press), seed)


def make_record(scene: ContactScene, cfg: SkinConfig) -> Record:
    depth = rasterize_depth(scene, cfg).astype(np.float32)
    mag = simulate_mag(depth.astype(np.float64), cfg, noise_seed=scene.rng_seed).astype(np.float32)
    meta = SampleMeta(scene.shape.name, scene.tx, scene.ty, scene.theta, scene.press_depth, scene.rng_seed)
    return Record(mag, depth, meta)


def generate_dataset(shapes, n_per_shape, cfg: SkinConfig, seed, path=None):
    """Generate ``n_per_shape`` random contacts per shape, optionally writing a dataset file.

    Poses and press depths are drawn from one generator seeded by ``seed``,
    shape-major, so output is reproducible bit for bit.
    """
    if n_per_shape < 0:
        raise ValueError("n_per_shape must be >= 0")
    shapes = [get_shape(s) if isinstance(s, str) else s for s in shapes]
    rng = np.random.default_rng(seed)
    scenes = [draw_scene(shape, rng, cfg) for shape in shapes for _ in range(n_per_shape)]
    records = [make_record(sc, cfg) for sc in scenes]
    if path is not None:
        from .ingest import write_dataset

        write_dataset(records, Path(path), image_size=cfg.image_size)
    return records


def rod_scene(name, theta, press_depth=2.0, tx=0.0, ty=0.0):
    return ContactScene(get_shape(name), tx, ty, theta, press_depth)


def with_image_size(cfg: SkinConfig, n: int) -> SkinConfig:
    return replace(cfg, image_size=n)
