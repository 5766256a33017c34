"""Compare the compiled and pure-Python superpixel kernels.

    python benchmarks/bench_felzenszwalb.py [--sizes 32 64 128] [--repeat 5]

Times full ``felzenszwalb`` calls on phantom slices with each backend
swapped in, checks that both return identical labels, and prints a table.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fedseg import _fhcore_py, superpixel
from fedseg.datastore import generate_phantom


def load_backends():
    backends = {"python": _fhcore_py}
    try:
        from fedseg import _fhcore
    except ImportError:
        print("compiled extension not built; timing the Python kernels only")
    else:
        backends["cython"] = _fhcore
    return backends


def time_backend(core, image, repeat):
    saved = superpixel._core
    superpixel._core = core
    try:
        seg = superpixel.felzenszwalb(image)
        samples = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            superpixel.felzenszwalb(image)
            samples.append(time.perf_counter() - t0)
    finally:
        superpixel._core = saved
    return statistics.median(samples), seg


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = load_backends()
    print(f"{'size':>6} " + " ".join(f"{name + ' ms':>12}" for name in backends) + f" {'speedup':>9} {'segments':>9}")
    for hw in args.sizes:
        image = generate_phantom(0, "MR_T2", 3, hw, 4).voxels[1]
        results = {name: time_backend(core, image, args.repeat) for name, core in backends.items()}
        labels = [seg.labels for _, seg in results.values()]
        if not all(np.array_equal(labels[0], lab) for lab in labels[1:]):
            raise SystemExit(f"backends disagree at {hw}x{hw}")
        times = {name: t for name, (t, _) in results.items()}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        n_seg = next(iter(results.values()))[1].num_segments
        print(f"{hw:>6} " + " ".join(f"{1e3 * t:>12.2f}" for t in times.values()) + f" {speedup:>8.1f}x {n_seg:>9}")


if __name__ == "__main__":
    main()
