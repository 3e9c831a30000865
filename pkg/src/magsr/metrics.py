"""Image quality metrics: PSNR, SSIM, and a Frechet feature distance.

The Frechet distance embeds images with a fixed random convolutional network
rather than Inception, so its scale is internal to this package. The network
weights are generated from xoshiro256** seeded through splitmix64 with
``FEATURE_SEED``; draw order is layer by layer, weights in (out, in, kh, kw)
C order followed by the biases. A 64-bit draw ``x`` maps to
``u = (x >> 11) * 2**-53`` and then to ``(2u - 1) * bound``, with
``bound = sqrt(6 / fan_in)`` for weights and ``1 / sqrt(fan_in)`` for biases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import convolve2d

FEATURE_SEED = 0x5EEDF1D0
FEATURE_CHANNELS = (1, 16, 32, 64, 64)
_MASK = (1 << 64) - 1


def psnr(a, b, data_range=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over the valid region with a Gaussian window."""
    return float(np.mean(ssim_map(a, b, window, sigma, k1, k2, data_range)))


# -- fixed feature extractor ---------------------------------------------------


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    """xoshiro256** 64-bit generator."""

    def __init__(self, seed):
        sm = seed & _MASK
        self.s = []
        for _ in range(4):
            sm, v = _splitmix64(sm)
            self.s.append(v)

    def next_u64(self):
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, n):
        """``n`` doubles in [0, 1)."""
        return np.array([(self.next_u64() >> 11) * 2.0**-53 for _ in range(n)])


@lru_cache(maxsize=1)
def feature_weights():
    """List of (weight (out, in, 3, 3), bias (out,)) for the four stride-2 layers."""
    rng = Xoshiro256(FEATURE_SEED)
    layers = []
    for cin, cout in zip(FEATURE_CHANNELS[:-1], FEATURE_CHANNELS[1:]):
        fan_in = cin * 9
        w = (2 * rng.uniform(cout * cin * 9) - 1) * math.sqrt(6.0 / fan_in)
        b = (2 * rng.uniform(cout) - 1) / math.sqrt(fan_in)
        layers.append((w.reshape(cout, cin, 3, 3), b))
    return layers


def _conv_s2(x, w, b):
    # x: (N, C, H, W), 3x3 kernel, stride 2, zero padding 1
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh, ow = (h + 1) // 2, (wd + 1) // 2
    patches = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2][:, :, :oh, :ow]
    return np.einsum("nchwij,ocij->nohw", patches, w, optimize=True) + b[None, :, None, None]


def extract_features(images):
    """(N, H, W) images in [0, 1] -> (N, 64) globally average-pooled features."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    h = x[:, None]
    for w, b in feature_weights():
        h = np.maximum(_conv_s2(h, w, b), 0.0)
    return h.mean(axis=(2, 3))


# -- Frechet distance ---------------------------------------------------------


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2, ridge=1e-6):
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of the product root is computed as the trace of
    ``(S1 C2 S1)^(1/2)`` with ``S1 = C1^(1/2)``, which is symmetric.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    if min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min()) <= 0:
        eye = np.eye(len(mu1)) * ridge
        cov1, cov2 = cov1 + eye, cov2 + eye
    s1 = _psd_sqrt(cov1)
    cross = np.linalg.eigvalsh((lambda m: (m + m.T) / 2.0)(s1 @ cov2 @ s1))
    tr_sqrt = np.sqrt(np.clip(cross, 0.0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    if d < 0 and d >= -1e-6:
        d = 0.0
    return d


def fid_from_features(fa, fb):
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least two samples per set")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def fid(set_a, set_b):
    return fid_from_features(extract_features(set_a), extract_features(set_b))


# -- reports ------------------------------------------------------------------


@dataclass
class MetricReport:
    method: str
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    fid: float = float("nan")

    @staticmethod
    def _stats(v):
        v = np.asarray(v, dtype=np.float64)
        return float(v.mean()), float(v.std())

    @property
    def psnr_mean_std(self):
        return self._stats(self.psnr)

    @property
    def ssim_mean_std(self):
        return self._stats(self.ssim)

    def row(self):
        pm, ps = self.psnr_mean_std
        sm, ss = self.ssim_mean_std
        return f"{self.method:<22} {self.fid:10.2f} {pm:8.2f} +- {ps:5.2f} {sm:6.2f} +- {ss:4.2f}"

    def to_dict(self):
        pm, ps = self.psnr_mean_std
        sm, ss = self.ssim_mean_std
        return {
            "method": self.method,
            "n": len(self.psnr),
            "fid": self.fid,
            "psnr_mean": pm,
            "psnr_std": ps,
            "ssim_mean": sm,
            "ssim_std": ss,
        }


def evaluate(method, preds, targets):
    """Per-image PSNR/SSIM plus set-level FID between predictions and targets."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    rep = MetricReport(method)
    for p, t in zip(preds, targets):
        rep.psnr.append(psnr(p, t))
        rep.ssim.append(ssim(p, t))
    rep.fid = fid(preds, targets) if len(preds) >= 2 else float("nan")
    return rep


TABLE_HEADER = f"{'Method':<22} {'FID':>10} {'PSNR[dB]':>16} {'SSIM':>14}"
