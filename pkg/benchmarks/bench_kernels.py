"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from magsr import _kernels_py as py

try:
    from magsr import _ckernels as cy
except ImportError:
    cy = None


def cases():
    rng = np.random.default_rng(0)
    stream = rng.integers(0, 256, 198 * 1000, dtype=np.uint8).tobytes()
    frame = stream[2:196]
    n = 40
    xs = (np.arange(n) + 0.5) * 20.0 / n - 10.0
    gx, gy = np.meshgrid(xs, xs)
    sources = np.stack([gx.ravel(), gy.ravel(), np.full(n * n, 2.5) - rng.random(n * n)], axis=1)
    moments = np.ones(n * n)
    t = (np.arange(4) - 1.5) * 5.0
    tx, ty = np.meshgrid(t, t)
    sensors = np.stack([tx.ravel(), ty.ravel(), np.full(16, -1.5)], axis=1)
    return {
        "crc16 frame (194 B)": lambda k: k.crc16_ccitt(frame),
        "crc16 stream (198 kB)": lambda k: k.crc16_ccitt(stream),
        "dipole field 1600x16": lambda k: k.dipole_field(sources, moments, sensors),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", py)] + ([("cython", cy)] if cy is not None else [])
    if cy is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name, _ in backends) + ("   speedup" if cy else ""))
    for label, fn in cases().items():
        times = []
        for _, mod in backends:
            timer = timeit.Timer(lambda: fn(mod))
            loops, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, loops)) / loops)
        row = f"{label:<24}" + "".join(f"{t * 1e6:11.1f} us" for t in times)
        if cy is not None:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
