"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are timed in one process via ``kernels.backend``; numba is warmed
up (JIT compile) before timing.  ``MBCONVNEXT_NO_NUMBA=1`` selects the numpy
path at import time for normal use.
"""
import argparse
import time

import numpy as np

from mbconvnext import imaging, kernels
from mbconvnext import model as M


def _cases(rng):
    img = rng.random((512, 512))
    mask = rng.random((512, 512)) < 0.45
    xp = rng.standard_normal((8, 68, 68, 48)).astype(np.float32)
    k = rng.standard_normal((7, 7, 48)).astype(np.float32)
    dy = rng.standard_normal((8, 62, 62, 48)).astype(np.float32)
    z = rng.standard_normal((8, 62, 62, 96)).astype(np.float32)
    x2 = rng.standard_normal((8 * 62 * 62, 48)).astype(np.float32)
    g, b = np.ones(48, np.float32), np.zeros(48, np.float32)
    batch = rng.random((4, 250, 250)).astype(np.float32)
    model = M.build_model()
    return {
        "label8 512x512": lambda: kernels.label8(mask),
        "clahe 512x512": lambda: imaging.clahe(img),
        "depthwise fwd 8x62x62x48 k7": lambda: kernels.depthwise_forward(xp, k, 1, 62, 62),
        "depthwise bwd 8x62x62x48 k7": lambda: kernels.depthwise_backward(xp, k, dy, 1),
        "gelu fwd 8x62x62x96": lambda: kernels.gelu_forward(z),
        "layernorm fwd 30752x48": lambda: kernels.layer_norm_forward(x2, g, b, 1e-6),
        "model forward 4x250x250": lambda: M.forward(model, batch),
    }


def _best(fn, repeat):
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return min(ts)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    names = kernels.available_backends()
    print(f"{'case':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases.items():
        row = {}
        for n in names:
            with kernels.backend(n):
                fn()  # warm-up / compile
                row[n] = _best(fn, args.repeat)
        line = f"{label:32s}" + "".join(f"{row[n] * 1e3:10.2f}ms" for n in names)
        if len(names) == 2:
            line += f"{row['numpy'] / row['numba']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
