"""Wall-clock comparison of the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--train-steps N]

Reports the best of ``repeat`` timings for the matmul kernels at shapes the
training loop uses, then a few training steps end to end, and checks that
both backends produce bitwise-identical results.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from codsparse.model import ModelConfig
from codsparse.numkernel import Rng, kernels, use_backend
from codsparse.train import TrainConfig, train_run

MATMUL_SHAPES = [((512, 128), (128, 128)), ((512, 128), (128, 256)), ((512, 256), (256, 128)),
                 ((128, 512), (512, 128))]
BMM_SHAPES = [((32, 64, 32), (32, 32, 64)), ((32, 64, 64), (32, 64, 32))]


def best_time(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def bench_kernel(name, fn, shapes, repeat):
    rng = Rng(0, "bench")
    rows = []
    for a_shape, b_shape in shapes:
        a, b = rng.normal(a_shape), rng.normal(b_shape)
        results = {}
        for backend in ("numba", "numpy"):
            with use_backend(backend):
                fn(a, b)  # compile / warm up
                results[backend] = best_time(lambda: fn(a, b), repeat)
        same = np.array_equal(results["numba"][1], results["numpy"][1])
        rows.append((f"{name} {a_shape}x{b_shape}", results["numba"][0], results["numpy"][0], same))
    return rows


def bench_training(steps: int):
    model = ModelConfig(depth=2, d_model=64, n_heads=4, n_kv_heads=4, mlp_hidden=128, max_seq_len=64)
    train = TrainConfig(steps=steps, batch_size=4, seq_len=32, lr_peak=3e-3, warmup_steps=1,
                        probe_every=steps, corpus_path="builtin:synthetic:200000:0")
    out = {}
    for backend in ("numba", "numpy"):
        with use_backend(backend):
            train_run(model, train.replace(steps=1, warmup_steps=0, probe_every=1))  # warm up
            start = time.perf_counter()
            result = train_run(model, train)
            out[backend] = (time.perf_counter() - start, result.timeline[-1]["loss"])
    return out


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--train-steps", type=int, default=10)
    args = parser.parse_args(argv)

    rows = bench_kernel("matmul", kernels.matmul2d, MATMUL_SHAPES, args.repeat)
    rows += bench_kernel("bmm", kernels.bmm, BMM_SHAPES, args.repeat)
    print(f"{'kernel':<40}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  bitwise")
    for label, t_numba, t_numpy, same in rows:
        print(f"{label:<40}{t_numba * 1e3:>10.2f}{t_numpy * 1e3:>10.2f}{t_numpy / t_numba:>9.1f}  {same}")

    if args.train_steps > 0:
        train = bench_training(args.train_steps)
        (tn, ln), (tp, lp) = train["numba"], train["numpy"]
        print(f"\n{args.train_steps} training steps: numba {tn:.2f} s, numpy {tp:.2f} s "
              f"(speedup {tp / tn:.1f}); final loss identical: {ln == lp}")


if __name__ == "__main__":
    main()
