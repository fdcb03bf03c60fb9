"""Time every kernel under numba and numpy, then one full training step per backend.

    python benchmarks/bench_kernels.py [--repeat 200]

The end-to-end rows run in subprocesses so that ``CTXEMO_NUMBA`` takes effect.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ctxemo import kernels


def kernel_cases(rng, dtype=np.float32):
    T, d, f = 96, 64, 256
    reps = rng.standard_normal((T, d)).astype(dtype)
    bounds = np.sort(rng.choice(np.arange(1, T), size=20, replace=False))
    starts = np.concatenate([[1], bounds[:-1] + 1]).astype(np.int64)
    ends = bounds.astype(np.int64) + 1
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    pooled = rng.standard_normal((len(starts), d)).astype(dtype)
    _, arg = kernels.NUMPY_KERNELS["max_pool"](reps, starts, ends)
    gain, bias = np.ones(d, dtype), np.zeros(d, dtype)
    _, xhat, inv = kernels.NUMPY_KERNELS["layer_norm"](reps, gain, bias, 1e-12)
    hidden = rng.standard_normal((T, f)).astype(dtype)
    golds = rng.integers(0, 5, 3000)
    preds = rng.integers(0, 5, 3000)
    return {
        "max_pool": (reps, starts, ends),
        "max_pool_backward": (pooled, arg, T),
        "mean_pool": (reps, starts, ends),
        "mean_pool_backward": (pooled, starts, ends, T),
        "layer_norm": (reps, gain, bias, 1e-12),
        "layer_norm_backward": (reps, xhat, inv, gain),
        "gelu": (hidden,),
        "gelu_backward": (hidden, hidden),
        "confusion": (golds, preds, 5),
    }


STEP_SNIPPET = """
import time
from ctxemo.synthetic import make_synthetic_corpus
from ctxemo.tokenizer import build_vocab
from ctxemo.encoder import preset
from ctxemo.training import TrainConfig, train
c = make_synthetic_corpus(60, seed=0)
v = build_vocab(c)
train(c, None, v, TrainConfig(epochs=1), preset('toy', len(v)))  # warm-up / JIT
t = time.perf_counter()
train(c, None, v, TrainConfig(epochs=2), preset('toy', len(v)))
print((time.perf_counter() - t) / 120 * 1e3)
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, args_ in cases.items():
        kernels.NUMBA_KERNELS[name](*args_)  # compile
        t_np = timeit.timeit(lambda: kernels.NUMPY_KERNELS[name](*args_), number=args.repeat) / args.repeat
        t_nb = timeit.timeit(lambda: kernels.NUMBA_KERNELS[name](*args_), number=args.repeat) / args.repeat
        print(f"{name:<22}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")
    if args.skip_e2e:
        return
    print()
    for flag in ("0", "1"):
        env = dict(os.environ, CTXEMO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True,
                             text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"train step ({label:>5}): {float(out.stdout.strip()):.2f} ms/dialogue")


if __name__ == "__main__":
    main()
