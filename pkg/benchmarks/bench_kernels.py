"""Benchmark the compiled convolution core against the numpy fallback.

Times forward, input-gradient and weight-gradient kernels on layer shapes
taken from the segmentation network at batch 8, 64x64 input. Run as

    python3 benchmarks/bench_kernels.py [--repeat N] [--dtype float32]
"""

import argparse
import time

import numpy as np

from eddyseg.kernels import npconv

try:
    from eddyseg.kernels import _convcore
except ImportError:
    _convcore = None

# label, batch, c_in, c_out, hw, kernel, stride, dilation, pad
CASES = [
    ("down1 3x3", 8, 4, 8, 64, 3, 1, 1, 1),
    ("down3 3x3", 8, 16, 32, 16, 3, 1, 1, 1),
    ("transition 3x3", 8, 64, 128, 4, 3, 1, 1, 1),
    ("up4 3x3 rate4", 8, 8, 8, 64, 3, 1, 4, 4),
    ("head 1x1", 8, 8, 3, 64, 1, 1, 1, 0),
]


def best_of(fn, args, repeat):
    fn(*args)  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(impl, case, dtype, repeat):
    label, n, cin, cout, hw, k, stride, dilation, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, cin, hw, hw)).astype(dtype)
    w = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    y = impl.conv2d_forward(x, w, stride, dilation, pad)
    dout = np.ascontiguousarray(rng.standard_normal(y.shape).astype(dtype))
    return (
        best_of(impl.conv2d_forward, (x, w, stride, dilation, pad), repeat),
        best_of(impl.conv2d_grad_input,
                (dout, w, hw, hw, stride, dilation, pad), repeat),
        best_of(impl.conv2d_grad_weights,
                (dout, x, k, k, stride, dilation, pad), repeat),
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20,
                        help="timed repetitions per kernel (best-of)")
    parser.add_argument("--dtype", default="float32",
                        choices=("float32", "float64"))
    args = parser.parse_args()
    dtype = np.dtype(args.dtype)

    if _convcore is None:
        print("compiled core not available; showing numpy fallback only")
    header = (f"{'case':<16} {'kernel':<13} {'numpy ms':>9}"
              + (f" {'cython ms':>10} {'speedup':>8}" if _convcore else ""))
    print(header)
    print("-" * len(header))
    for case in CASES:
        np_times = bench_case(npconv, case, dtype, args.repeat)
        cy_times = (bench_case(_convcore, case, dtype, args.repeat)
                    if _convcore else None)
        for i, kind in enumerate(("forward", "grad_input", "grad_weights")):
            line = f"{case[0]:<16} {kind:<13} {np_times[i] * 1e3:>9.3f}"
            if cy_times:
                line += (f" {cy_times[i] * 1e3:>10.3f}"
                         f" {np_times[i] / cy_times[i]:>7.1f}x")
            print(line)


if __name__ == "__main__":
    main()
