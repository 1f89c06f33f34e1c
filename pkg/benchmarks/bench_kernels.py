"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``; prints one row per kernel
with the median wall time of each backend and the speed-up.
"""
import argparse
import timeit

import numpy as np

from segdet import kernels


def cases(rng):
    # shapes of the first U-Net level at the default 32x48x32 volume
    padded = (34, 50, 34)
    size = int(np.prod(padded))
    offsets = np.ravel_multi_index(tuple(np.indices((3, 3, 3)).reshape(3, -1)), padded).astype(np.int64)
    length = size - int(offsets[-1])
    z = rng.standard_normal((27, 8, size)).astype(np.float32)
    zt = rng.standard_normal((27, 8, length)).astype(np.float32)
    x = rng.standard_normal((8, 32, 48, 32)).astype(np.float32)
    y, idx = kernels.fallback.maxpool_forward(x, (2, 2, 2))
    g = rng.standard_normal(y.shape).astype(np.float32)
    xy = rng.uniform(0, 200, size=(2000, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(5, 40, size=(2000, 2))], axis=1)
    order = np.argsort(-rng.uniform(size=2000))
    return {
        "shift_accumulate": lambda b: b.shift_accumulate(z, offsets, length),
        "shift_scatter": lambda b: b.shift_scatter(zt, offsets, size),
        "maxpool_forward": lambda b: b.maxpool_forward(x, (2, 2, 2)),
        "maxpool_backward": lambda b: b.maxpool_backward(g, idx, (2, 2, 2)),
        "nms_sorted": lambda b: b.nms_sorted(boxes, order, 0.5),
    }


def median_time(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speed-up':>10}")
    for name, call in cases(rng).items():
        slow = median_time(lambda: call(kernels.fallback), args.repeat) * 1e3
        if kernels.compiled is None:
            print(f"{name:<18}{slow:>10.2f}{'-':>11}{'-':>10}")
            continue
        fast = median_time(lambda: call(kernels.compiled), args.repeat) * 1e3
        print(f"{name:<18}{slow:>10.2f}{fast:>11.2f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
