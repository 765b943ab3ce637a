"""Compare the compiled and numpy kernel backends.

Times each kernel on representative shapes, checks the two backends agree
bit for bit, then times one training epoch of a small config under each.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import contextlib
import time
import timeit

import numpy as np

from udmlss import kernels
from udmlss.config import ExperimentConfig
from udmlss.training import AdamState, cluster_for_epoch, load_data, new_model, train_epoch

NAMES = ("im2col3x3", "col2im3x3", "sq_distances", "assign_nearest", "mine_masks")


@contextlib.contextmanager
def backend(module):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(module, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def cases(rng):
    xp = rng.standard_normal((70, 16, 18, 18)).astype(np.float32)
    dcols = rng.standard_normal((70, 8, 8, 16 * 9)).astype(np.float32)
    pts = rng.standard_normal((1600, 32))
    cents = rng.standard_normal((8, 32))
    e = rng.standard_normal((70, 32))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    S = e @ e.T
    labels = np.repeat(np.arange(14), 5).astype(np.int64)
    return {
        "im2col3x3 [70,16,18,18] s2": ("im2col3x3", (xp, 2, 8, 8)),
        "col2im3x3 [70,8,8,144] s2": ("col2im3x3", (dcols, 16, 18, 18, 2)),
        "sq_distances 1600x8x32": ("sq_distances", (pts, cents)),
        "assign_nearest 1600x8x32": ("assign_nearest", (pts, cents)),
        "mine_masks 70x70": ("mine_masks", (S, labels, 0.1)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


def time_epoch(module, config):
    train, _ = load_data(config)
    with backend(module):
        params = new_model(config)
        state = AdamState.zeros_like(params.named())
        pseudo = cluster_for_epoch(params, train.images, config, 0)
        t0 = time.perf_counter()
        train_epoch(params, state, pseudo, train.images, config, 0)
        return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend can be timed")

    rng = np.random.default_rng(0)
    header = f"{'kernel':<30s}" + "".join(f"{n + ' (ms)':>16s}" for n in backends) + f"{'speedup':>10s}  agree"
    print(header)
    for label, (name, call_args) in cases(rng).items():
        times, outs = {}, {}
        for bname, mod in backends.items():
            fn = getattr(mod, name)
            outs[bname] = fn(*call_args)
            best = min(timeit.repeat(lambda: fn(*call_args), number=args.number, repeat=args.repeat))
            times[bname] = best / args.number * 1e3
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        agree = same(outs["python"], outs["cython"]) if "cython" in outs else True
        print(f"{label:<30s}" + "".join(f"{times[b]:16.3f}" for b in backends) + f"{speed:10.2f}  {agree}")

    config = ExperimentConfig(k=8, epochs=1, lr=2e-3)
    print("\none training epoch (8 classes x 200, 32x32, k=8):")
    for bname, mod in backends.items():
        print(f"  {bname:<8s} {time_epoch(mod, config):.2f} s")


if __name__ == "__main__":
    main()
