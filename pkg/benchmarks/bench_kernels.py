"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on fixed random inputs sized like the desk profile
(256x128 spectrograms, a few thousand Haar samples, 300-sample split scans).
"""

import argparse
import json
import timeit

import numpy as np

from escgan import _fallback
from escgan.surf import integral

try:
    from escgan import _kernels
except ImportError:
    _kernels = None


def cases():
    rng = np.random.default_rng(0)
    ii = integral(rng.integers(0, 256, (128, 256)).astype(np.float64))
    rows = rng.integers(0, 128, 4000).astype(np.int64)
    cols = rng.integers(0, 256, 4000).astype(np.int64)
    xs = np.sort(rng.standard_normal(300))
    ys = rng.integers(0, 10, 300).astype(np.int64)
    return {
        "hessian_map(size=15, step=1)": lambda m: m.hessian_map(ii, 15, 1),
        "hessian_map(size=51, step=2)": lambda m: m.hessian_map(ii, 51, 2),
        "haar_sample(4000 points)": lambda m: m.haar_sample(ii, rows, cols, 4),
        "gini_split_scan(n=300, k=10)": lambda m: m.gini_split_scan(xs, ys, 10, 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the timings here as well")
    args = ap.parse_args(argv)
    backends = {"python": _fallback}
    if _kernels is not None:
        backends["cython"] = _kernels
    results = {}
    print(f"{'kernel':32s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases().items():
        row = {}
        for label, mod in backends.items():
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            row[label] = min(timer.repeat(args.repeat, number)) / number
        results[name] = row
        line = f"{name:32s}" + "".join(f"{row[b] * 1e3:11.3f} ms" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
