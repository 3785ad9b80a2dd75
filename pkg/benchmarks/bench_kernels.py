"""Compare the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times a short training run under each backend in a subprocess, since
the backend is fixed at import time by MILBLOCK_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from milblock import _kernels as K
from milblock.rng import RandomStream

TRAIN_SNIPPET = """
import time
from milblock import _kernels
from milblock.data import SyntheticSpec, gen_embedding_bags
from milblock.head import MilConfig
from milblock.training import TrainConfig, fit
t0 = time.perf_counter()
tr = gen_embedding_bags(SyntheticSpec(bags=300, seed=1))
va = gen_embedding_bags(SyntheticSpec(bags=90, seed=2))
t1 = time.perf_counter()
fit(tr, va, MilConfig("I1", "topk", 0.25, 3, 16), TrainConfig(epochs=3, seed=3))
t2 = time.perf_counter()
print(f"{_kernels.BACKEND} {t1 - t0:.3f} {t2 - t1:.3f}")
"""


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    rng = np.random.default_rng(0)
    Z = rng.normal(size=(49, 16))
    W = rng.normal(size=(16, 3))
    G = rng.normal(size=(49, 3))
    X = rng.normal(size=(196, 8))
    state = RandomStream(1).state

    cases = [
        ("matmul_acc 49x16 @ 16x3", lambda f: f(Z, W), "matmul_acc", 200),
        ("matmul_acc grad 3x49 @ 49x16", lambda f: f(np.ascontiguousarray(G.T), Z), "matmul_acc", 200),
        ("topk_select 196x8, k=49", lambda f: f(X, 49), "topk_select", 200),
        ("uniform_fill 100k", lambda f: f(state.copy(), 100_000), "uniform_fill", 1),
        ("normal_fill 100k", lambda f: f(state.copy(), 100_000), "normal_fill", 1),
    ]
    print(f"{'kernel':32s} {'numpy (ms)':>12s} {'numba (ms)':>12s} {'speedup':>8s}")
    for label, call, name, inner in cases:
        np_fn, nb_fn = getattr(K, "np_" + name), getattr(K, "nb_" + name)
        call(nb_fn)  # compile / load cache
        t_np = best_of(lambda: [call(np_fn) for _ in range(inner)], args.repeat) / inner
        t_nb = best_of(lambda: [call(nb_fn) for _ in range(inner)], args.repeat) / inner
        print(f"{label:32s} {t_np * 1e3:12.4f} {t_nb * 1e3:12.4f} {t_np / t_nb:8.1f}x")

    print("\nend to end (300 train bags, 3 epochs), seconds:")
    print(f"{'backend':10s} {'generate':>10s} {'fit':>10s}")
    for flag in ("0", "1"):
        env = dict(os.environ, MILBLOCK_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"{out[0]:10s} {float(out[1]):10.3f} {float(out[2]):10.3f}")


if __name__ == "__main__":
    main()
