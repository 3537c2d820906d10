"""Time the compiled kernels against the numpy/scipy fallback.

    python bench/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from spar import _kernels_py

try:
    from spar import _kernels
except ImportError:
    _kernels = None


def _cases(rng):
    blobs = rng.random((32, 64, 64)) > 0.7
    surf_a = rng.random((3000, 3)) * 64
    surf_b = rng.random((3000, 3)) * 64
    codes = rng.normal(size=(500, 512))
    sq = (codes ** 2).sum(1)
    sqdist = np.maximum(sq[:, None] + sq[None, :] - 2 * codes @ codes.T, 0.0)
    return {
        "label_components 32x64x64": ("label_components", (np.ascontiguousarray(blobs, dtype=np.uint8),)),
        "nearest_distances 3000x3000 (3D)": ("nearest_distances", (surf_a, surf_b)),
        "nearest_distances 500x500 (512D)": ("nearest_distances", (codes, codes[::-1].copy())),
        "perplexity_bisection N=500": ("perplexity_bisection", (sqdist, 30.0)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, (fn, inputs) in _cases(np.random.default_rng(0)).items():
        times = {b: min(timeit.repeat(lambda: getattr(mod, fn)(*inputs), number=1, repeat=args.repeat))
                 for b, mod in backends.items()}
        row = f"{label:36s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times.values())
        if len(times) > 1:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
