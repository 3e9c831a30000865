"""In-plane pose (angle) estimation from contact images, and the reorientation trial harness."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .baseline import bilinear_upsample, to_unit_range, z_grid


class PoseEstimationError(ValueError):
    pass


class NoContactError(PoseEstimationError):
    pass


class DegenerateOrientationError(PoseEstimationError):
    pass


def reduce_angle(deg):
    """Reduce an axis angle into [-90, 90)."""
    return (deg + 90.0) % 180.0 - 90.0


def angular_distance(a, b):
    """Distance between two axis angles, modulo 180 degrees; in [0, 90]."""
    return abs(reduce_angle(a - b))


def denoise(img, percentile_clip=99.5, blur_sigma=1.0):
    """Clip values above the given percentile, then Gaussian-blur; output in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    out = np.minimum(img, np.percentile(img, percentile_clip))
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, blur_sigma, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def principal_axis(img, threshold=0.2, min_pixels=8, isotropy_ratio=1.05):
    """Intensity-weighted principal axis of pixels above ``threshold``.

    Returns ``(angle_deg, eigenvalue_ratio)``; the angle is measured
    counter-clockwise from +x with +y pointing to the top of the image.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = np.nonzero(img > threshold)
    if len(rows) < min_pixels:
        raise NoContactError(f"no contact: {len(rows)} pixels above {threshold}")
    w = img[rows, cols]
    pts = np.stack([cols, -rows], axis=1).astype(np.float64)
    mean = (w[:, None] * pts).sum(0) / w.sum()
    d = pts - mean
    cov = (w[:, None, None] * d[:, :, None] * d[:, None, :]).sum(0) / w.sum()
    vals, vecs = np.linalg.eigh(cov)
    ratio = vals[1] / vals[0] if vals[0] > 0 else math.inf
    if ratio < isotropy_ratio:
        raise DegenerateOrientationError(f"degenerate orientation: eigenvalue ratio {ratio:.3f}")
    vx, vy = vecs[:, 1]
    return reduce_angle(math.degrees(math.atan2(vy, vx))), ratio


def estimate_angle(img, threshold=0.2):
    return principal_axis(img, threshold)[0]


def baseline_pose_field(mag_raw, size=16):
    """4x4 z-axis grid bilinearly upscaled to ``size`` x ``size`` and mapped to [0, 1]."""
    return to_unit_range(bilinear_upsample(z_grid(mag_raw), size, size))


def baseline_pose_path(mag_raw, size=16, threshold=0.2, percentile_clip=99.5, blur_sigma=1.0):
    return estimate_angle(denoise(baseline_pose_field(mag_raw, size), percentile_clip, blur_sigma), threshold)


def image_pose_path(img, threshold=0.2, percentile_clip=99.5, blur_sigma=1.0):
    return estimate_angle(denoise(img, percentile_clip, blur_sigma), threshold)


@dataclass
class PoseTrial:
    object_id: str
    true_angle: float
    method: str
    estimate: float = math.nan
    success: bool = False
    error: str = ""


@dataclass
class SuccessTable:
    trials: list = field(default_factory=list)
    tolerance: float = 5.0

    def counts(self):
        total = Counter(t.method for t in self.trials)
        ok = Counter(t.method for t in self.trials if t.success)
        return {m: (ok[m], total[m]) for m in total}

    def rate(self, method):
        ok, n = self.counts().get(method, (0, 0))
        return ok / n if n else math.nan

    def format(self):
        lines = [f"{'method':<12} {'success':>8} {'rate':>7}"]
        for m, (ok, n) in self.counts().items():
            lines.append(f"{m:<12} {ok:>4}/{n:<3} {100.0 * ok / n:6.1f}%")
        return "\n".join(lines)


def evaluate_reorientation(trials, estimators, tolerance=5.0):
    """Run each ``(scene, method)`` trial through ``estimators[method](scene)``.

    A trial succeeds when the estimate lies within ``tolerance`` degrees of
    the scene angle, modulo 180. Estimation errors count as failures.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("at least one trial is required")
    table = SuccessTable(tolerance=tolerance)
    for scene, method in trials:
        truth = reduce_angle(scene.theta)
        rec = PoseTrial(scene.shape.name, truth, method)
        try:
            rec.estimate = float(estimators[method](scene))
        except PoseEstimationError as e:
            rec.error = str(e)
        else:
            rec.success = angular_distance(rec.estimate, truth) <= tolerance
        table.trials.append(rec)
    return table
