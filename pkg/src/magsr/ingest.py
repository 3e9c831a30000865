"""Dataset files, preprocessing, and the MBTS wire-frame codec.

Dataset file (all little-endian)::

    magic     4s   b"SMAG"
    version   u16  1
    height    u16
    width     u16
    count     u32
    records   count x [48 f32 mag (taxel-major x,y,z) | H*W f32 depth (row-major)
                       | 16s shape_id | 4 f64 tx, ty, theta, press_depth | u64 seed]

Wire frame (198 bytes)::

    0xAA 0x55 | seq u16 | 48 f32 payload | crc u16

with the CRC-16/CCITT (poly 0x1021, init 0xFFFF) taken over seq + payload.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import crc16_ccitt
from .simkit import Record, SampleMeta

MAG_SHAPE = (4, 4, 3)
MAG_LEN = 48
CLAMP = 500.0

MAGIC = b"SMAG"
VERSION = 1
HEADER = struct.Struct("<4sHHHI")
META = struct.Struct("<16s4dQ")

SYNC = b"\xaa\x55"
FRAME_LEN = 2 + 2 + 4 * MAG_LEN + 2
_SEQ = struct.Struct("<H")
_CRC = struct.Struct("<H")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


def clamp_normalize(raw):
    """Clamp raw flux deltas to +-500 and scale into [-1, 1]."""
    return np.clip(np.asarray(raw, dtype=np.float64), -CLAMP, CLAMP) / CLAMP


def downsample_depth(img, height, width=None):
    """Area-average resample to ``height`` x ``width``; each output pixel is the
    overlap-weighted mean of the input pixels it covers."""
    width = height if width is None else width
    img = np.asarray(img, dtype=np.float64)
    sh, sw = img.shape
    if height > sh or width > sw:
        raise ValueError(f"downsample_depth cannot upsample {img.shape} to {(height, width)}")
    return _area_matrix(sh, height) @ img @ _area_matrix(sw, width).T


def _area_matrix(n_in, n_out):
    # row k: fraction of output cell k (in input-pixel units) overlapping each input pixel
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def median3x3(img):
    from scipy import ndimage

    return ndimage.median_filter(np.asarray(img, dtype=np.float64), size=3, mode="nearest")


def split_indices(n, seed=0, train_fraction=0.9):
    """Deterministic shuffled train/test index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# -- dataset files -----------------------------------------------------------


def record_size(height, width):
    return 4 * (MAG_LEN + height * width) + META.size


def write_dataset(records, path, image_size=None):
    path = Path(path)
    records = list(records)
    if records:
        h, w = records[0].depth.shape
    elif image_size is not None:
        h = w = int(image_size)
    else:
        raise ValueError("image_size is required to write an empty dataset")
    buf = bytearray(HEADER.pack(MAGIC, VERSION, h, w, len(records)))
    for r in records:
        mag = np.asarray(r.mag_raw, dtype="<f4")
        depth = np.asarray(r.depth, dtype="<f4")
        if mag.size != MAG_LEN or depth.shape != (h, w):
            raise ValueError("record shapes are inconsistent with the dataset header")
        m = r.meta
        name = m.shape_id.encode("ascii")
        if len(name) > 16:
            raise ValueError(f"shape id {m.shape_id!r} longer than 16 bytes")
        buf += mag.tobytes() + depth.tobytes()
        buf += META.pack(name, m.tx, m.ty, m.theta, m.press_depth, m.seed)
    try:
        path.write_bytes(bytes(buf))
    except OSError as e:
        raise OSError(f"cannot write dataset {path}: {e.strerror or e}") from e


def read_header(data, path="<bytes>"):
    if len(data) < HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, h, w, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    return h, w, count


def read_dataset(path):
    """Read a dataset file into a list of :class:`Record`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read dataset {path}: {e.strerror or e}") from e
    h, w, count = read_header(data, path)
    stride = record_size(h, w)
    need = HEADER.size + count * stride
    if len(data) < need:
        raise TruncatedFileError(f"{path}: truncated, expected {need} bytes for {count} records, got {len(data)}")
    records = []
    n_float = MAG_LEN + h * w
    for i in range(count):
        off = HEADER.size + i * stride
        floats = np.frombuffer(data, dtype="<f4", count=n_float, offset=off).astype(np.float32)
        name, tx, ty, theta, press, seed = META.unpack_from(data, off + 4 * n_float)
        meta = SampleMeta(name.rstrip(b"\0").decode("ascii"), tx, ty, theta, press, seed)
        records.append(Record(floats[:MAG_LEN].reshape(MAG_SHAPE), floats[MAG_LEN:].reshape(h, w), meta))
    return records


def stack_records(records):
    """(mag_raw (N,4,4,3) float32, depth (N,H,W) float32) arrays."""
    if not records:
        raise ValueError("no records")
    mags = np.stack([np.asarray(r.mag_raw, dtype=np.float32).reshape(MAG_SHAPE) for r in records])
    depths = np.stack([np.asarray(r.depth, dtype=np.float32) for r in records])
    return mags, depths


# -- wire frames -------------------------------------------------------------


def encode_frame(reading, seq):
    payload = np.asarray(reading, dtype="<f4").reshape(-1)
    if payload.size != MAG_LEN:
        raise ValueError(f"reading must have {MAG_LEN} values, got {payload.size}")
    body = _SEQ.pack(seq & 0xFFFF) + payload.tobytes()
    return SYNC + body + _CRC.pack(crc16_ccitt(body))


@dataclass
class StreamStats:
    frames: int = 0
    crc_errors: int = 0
    skipped_bytes: int = 0


@dataclass
class StreamDecoder:
    """Incremental frame decoder; feed arbitrary chunks, collect ``(seq, reading)``.

    After a CRC failure the search restarts one byte past the failed sync
    pair, so a genuine frame that begins inside a corrupted one is not lost.
    """

    stats: StreamStats = field(default_factory=StreamStats)
    _buf: bytearray = field(default_factory=bytearray, repr=False)

    def feed(self, chunk):
        buf = self._buf
        buf += chunk
        out = []
        pos = 0
        n = len(buf)
        while True:
            start = buf.find(SYNC, pos)
            if start < 0:
                # keep a trailing 0xAA: it may pair with the next chunk
                keep = 1 if n > pos and buf[-1] == 0xAA else 0
                self.stats.skipped_bytes += n - pos - keep
                pos = n - keep
                break
            self.stats.skipped_bytes += start - pos
            pos = start
            if n - start < FRAME_LEN:
                break
            body = bytes(buf[start + 2 : start + FRAME_LEN - 2])
            (crc,) = _CRC.unpack_from(buf, start + FRAME_LEN - 2)
            if crc16_ccitt(body) != crc:
                self.stats.crc_errors += 1
                self.stats.skipped_bytes += 1
                pos = start + 1
                continue
            (seq,) = _SEQ.unpack_from(body, 0)
            reading = np.frombuffer(body, dtype="<f4", offset=2).astype(np.float32).reshape(MAG_SHAPE)
            out.append((seq, reading))
            self.stats.frames += 1
            pos = start + FRAME_LEN
        del buf[:pos]
        return out

    def close(self):
        """Account for any unconsumed tail bytes at end of stream."""
        self.stats.skipped_bytes += len(self._buf)
        self._buf.clear()


def decode_stream(data, chunk_size=None):
    """Decode a complete byte stream; returns ``(frames, stats)``."""
    dec = StreamDecoder()
    frames = []
    if chunk_size is None:
        frames = dec.feed(data)
    else:
        for i in range(0, len(data), chunk_size):
            frames.extend(dec.feed(data[i : i + chunk_size]))
    dec.close()
    return frames, dec.stats
