"""Time the compiled conv2d kernels against the numpy fallback.

Run from the repository root after an editable install::

    python benchmarks/bench_kernels.py --repeat 50
"""

import argparse
import timeit

import numpy as np

from persam.kernels import _reference

try:
    from persam.kernels import _conv
except ImportError:  # extension not built
    _conv = None

# (batch, height, width, in_channels, out_channels): the two extractor layers at
# desk scale with a 16-patch bag, plus one larger layer
SHAPES = [(16, 16, 16, 3, 8), (16, 8, 8, 8, 16), (64, 32, 32, 8, 16)]


def bench(fn, args, repeat):
    fn(*args)  # warm up
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    backends = [("numpy", _reference)] + ([("compiled", _conv)] if _conv is not None else [])
    if _conv is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'shape (n,h,w,cin,cout)':<26}{'pass':<10}" + "".join(f"{n:>12}" for n, _ in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for n, h, w, cin, cout in SHAPES:
        x = rng.normal(size=(n, h, w, cin))
        k = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        y = _reference.conv2d_forward(x, k, b, 2, 1)
        gy = rng.normal(size=y.shape)
        for label, name, call_args in (("forward", "conv2d_forward", (x, k, b, 2, 1)),
                                       ("backward", "conv2d_backward", (x, k, gy, 2, 1))):
            times = [bench(getattr(mod, name), call_args, args.repeat) for _, mod in backends]
            row = f"{str((n, h, w, cin, cout)):<26}{label:<10}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>11.1f}x"
            print(row)
        if _conv is not None:
            assert np.allclose(_conv.conv2d_forward(x, k, b, 2, 1), y)


if __name__ == "__main__":
    main()
