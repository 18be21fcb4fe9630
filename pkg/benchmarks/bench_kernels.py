"""Time the compiled reduction kernels against the pure numpy fallback.

Both backends pin the same ascending-k accumulation order, so their
outputs are bitwise identical; this script reports what the compiled
core buys in wall time. Run from a checkout with the extension built:

    python benchmarks/bench_kernels.py
"""

import timeit

import numpy as np

from twotower import _kernels_py


def _load_compiled():
    try:
        from twotower import _kernels
    except ImportError:
        return None
    return _kernels


CASES = [
    ("matmul 64x64 @ 64x64", "matmul", (64, 64), (64, 64)),
    ("matmul 256x128 @ 128x64", "matmul", (256, 128), (128, 64)),
    ("matmul 512x512 @ 512x512", "matmul", (512, 512), (512, 512)),
    ("row_sum 256x256", "row_sum", (256, 256), None),
    ("row_sum 2048x512", "row_sum", (2048, 512), None),
]


def _time(func, args, repeat=5, number=20) -> float:
    return min(timeit.repeat(lambda: func(*args), repeat=repeat,
                             number=number)) / number


def main():
    compiled = _load_compiled()
    rng = np.random.default_rng(0)
    print(f"{'case':<28} {'python (ms)':>12} {'compiled (ms)':>14} "
          f"{'speedup':>8}  bitwise")
    for label, kind, shape_a, shape_b in CASES:
        a = rng.standard_normal(shape_a)
        if kind == "matmul":
            args = (a, rng.standard_normal(shape_b))
        else:
            args = (a,)
        py_fn = getattr(_kernels_py, kind)
        t_py = _time(py_fn, args)
        if compiled is None:
            print(f"{label:<28} {t_py * 1e3:>12.3f} {'missing':>14} "
                  f"{'-':>8}  -")
            continue
        c_fn = getattr(compiled, kind)
        t_c = _time(c_fn, args)
        same = np.array_equal(py_fn(*args), c_fn(*args))
        print(f"{label:<28} {t_py * 1e3:>12.3f} {t_c * 1e3:>14.3f} "
              f"{t_py / t_c:>7.1f}x  {same}")
    if compiled is None:
        print("\ncompiled core not importable; build with "
              "`pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
