"""Time the compiled kernels against the numpy fallback on training-sized batches.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 128]

Shapes follow the default model on a 32-sensor, 10-step window.
"""
import argparse
import timeit

import numpy as np

from aeda import _kernels_py

try:
    from aeda import _ckernels
except ImportError:
    _ckernels = None


def cases(batch, rng):
    x1 = rng.standard_normal((batch, 1, 32, 10))
    w1 = rng.standard_normal((16, 1, 3, 3))
    x2 = rng.standard_normal((batch, 16, 16, 5))
    w2 = rng.standard_normal((32, 16, 2, 2))
    a1 = rng.standard_normal((batch, 16, 32, 10))
    g1 = rng.standard_normal((batch, 16, 32, 10))
    g2 = rng.standard_normal((batch, 32, 16, 5))
    up = rng.standard_normal((batch, 32, 8, 5))
    return {
        "conv1 forward": lambda k: k.conv2d_forward(x1, w1, np.zeros(16)),
        "conv1 backward": lambda k: k.conv2d_backward(x1, w1, g1),
        "conv2 forward": lambda k: k.conv2d_forward(x2, w2, np.zeros(32)),
        "conv2 backward": lambda k: k.conv2d_backward(x2, w2, g2),
        "maxpool 2x2 fwd+bwd": lambda k: k.maxpool_backward(
            np.ones((batch, 16, 16, 5)), k.maxpool_forward(a1, 2, 2)[1], a1.shape),
        "upsample 2x1 fwd+bwd": lambda k: k.upsample_backward(k.upsample_forward(up, 2, 1), 2, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()
    backends = [("numpy", _kernels_py)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':24s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn in cases(args.batch, np.random.default_rng(0)).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm-up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3)
        speed = f"{times[0] / times[1]:9.2f}x" if len(times) == 2 else ""
        print(f"{label:24s}" + "".join(f"{t:10.3f}ms" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
