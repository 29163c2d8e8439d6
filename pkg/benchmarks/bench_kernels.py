"""Time the hot kernels under the numba and numpy backends.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
Numba timings exclude the first (compiling) call.
"""
import argparse
import time

import numpy as np

from bbtquant import _accel
from bbtquant.quant import pack_codes, quantize_groupwise, signround_refine, unpack_codes
from bbtquant.wht import fwht_normalized


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    X = rng.standard_normal((4096, 1024))
    codes = rng.integers(0, 4, 4_000_000, dtype=np.uint8)
    packed = pack_codes(codes, 2)
    W = rng.standard_normal((64, 512))
    calib = rng.standard_normal((256, 512))
    qt = quantize_groupwise(W, 2, 64)
    return {
        "fwht 4096x1024": lambda: fwht_normalized(X),
        "pack 4M 2-bit codes": lambda: pack_codes(codes, 2),
        "unpack 4M 2-bit codes": lambda: unpack_codes(packed, 2, codes.size),
        "signround 64x512, 1 pass": lambda: signround_refine(qt, W, calib, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
    results = {}
    for name in backends:
        with _accel.backend(name):
            for label, fn in cases(np.random.default_rng(0)).items():
                results.setdefault(label, {})[name] = best_of(fn, args.repeat)

    print(f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, row in results.items():
        line = f"{label:28s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['numpy'] / row['numba']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
