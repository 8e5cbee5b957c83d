"""Compare the compiled convolution kernels against the NumPy fallback.

Run from the repository root after installing the package:

    python benchmarks/bench_kernels.py [--repeat 20]

Reports the median wall time per call for each kernel at the shapes used by
training, the speed-up, and whether the two backends agree bit for bit. The
last section times one full training epoch-equivalent (a J1 and J2 gradient on
a batch) in subprocesses with each backend forced.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from unfoldreg import _conv_py

try:
    from unfoldreg import _conv
except ImportError:
    _conv = None

CASES = [
    ("prox layer 2->16", (1, 2, 16, 16), (16, 2, 3, 3)),
    ("prox layer 16->16", (1, 16, 16, 16), (16, 16, 3, 3)),
    ("icnn batch 16->16", (16, 16, 16, 16), (16, 16, 3, 3)),
    ("icnn batch 2->8", (64, 2, 16, 16), (8, 2, 3, 3)),
]

END_TO_END = """
import time
import numpy as np
from unfoldreg import kernels
from unfoldreg.linops import MaskedDFT, random_2d_mask
from unfoldreg.manifold import SyntheticManifold
from unfoldreg.penalty import IcnnPenalty
from unfoldreg.training import TrainConfig, loss_J1_grad, loss_J2
from unfoldreg.unfolded import UnfoldedModel

op = MaskedDFT(random_2d_mask((16, 16), 0.25, seed=0))
xs = SyntheticManifold.create((16, 16), 6, lo=-10.0, hi=10.0).sample(4, seed=0)
ys = op.apply(xs)
cfg = TrainConfig()
model = UnfoldedModel.init((16, 16), K=cfg.K, seed=0)
f = IcnnPenalty.init((16, 16), seed=0)
t0 = time.perf_counter()
for _ in range(3):
    loss_J1_grad(model, f, op, xs, ys, cfg)
    loss_J2(model, f, xs, ys, cfg, op=op, rng=0, with_grad=True)
print(kernels.BACKEND, (time.perf_counter() - t0) / 3)
"""


def median_time(fn, repeat):
    fn()
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'kernel':<14}{'python ms':>11}{'cython ms':>11}{'speed-up':>10}  max rel diff")
    for name, xshape, wshape in CASES:
        x = rng.standard_normal(xshape)
        w = rng.standard_normal(wshape)
        gy = rng.standard_normal((xshape[0], wshape[0]) + xshape[2:])
        calls = {
            "forward": lambda m: m.conv2d(x, w),
            "grad input": lambda m: m.conv2d_grad_input(gy, w),
            "grad weight": lambda m: m.conv2d_grad_weight(x, gy, *wshape[2:]),
        }
        for kernel, call in calls.items():
            tp = median_time(lambda: call(_conv_py), repeat)
            if _conv is None:
                print(f"{name:<22}{kernel:<14}{tp * 1e3:>11.3f}{'n/a':>11}")
                continue
            tc = median_time(lambda: call(_conv), repeat)
            ref, got = call(_conv_py), call(_conv)
            diff = np.max(np.abs(got - ref)) / np.max(np.abs(ref))
            print(f"{name:<22}{kernel:<14}{tp * 1e3:>11.3f}{tc * 1e3:>11.3f}{tp / tc:>9.1f}x  {diff:.1e}")


def bench_end_to_end():
    print("\nJ1 + J2 gradients on a batch of 4 (mean of 3):")
    for pure in ("1", "0"):
        env = dict(os.environ, UNFOLDREG_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]):.3f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    bench_kernels(args.repeat)
    bench_end_to_end()


if __name__ == "__main__":
    main()
