"""Time the numba and numpy kernel families on training-sized inputs.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Both families
are imported from the same module regardless of ``MERA_DISABLE_NUMBA``; the
first numba call of each kernel (compilation or cache load) is excluded.
Also reports the wall time of one full training stage under the active backend.
"""
import argparse
import time

import numpy as np

from mera.nnkernel import _kernels as K


def _time(fn, args, repeat):
    fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # warm-up / JIT
    best = float("inf")
    for _ in range(repeat):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        t0 = time.perf_counter()
        fn(*fresh)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(batch, dim, classes, rng):
    f32 = np.float32
    x = rng.standard_normal((batch, dim)).astype(f32)
    w = rng.standard_normal((dim, dim)).astype(f32)
    b = rng.standard_normal(dim).astype(f32)
    dy = rng.standard_normal((batch, dim)).astype(f32)
    g = np.ones(dim, f32)
    _, xhat, rstd = K.layernorm_fwd_np(x, g, b, 1e-5)
    logits = rng.standard_normal((batch, classes)).astype(f32)
    labels = rng.integers(0, classes, batch).astype(np.int64)
    _, probs = K.xent_fwd_np(logits, labels)
    p = rng.standard_normal(dim * dim).astype(f32)
    m = np.zeros(dim * dim)
    v = np.zeros(dim * dim)
    return {
        "linear_fwd": (x, w, b),
        "linear_bwd": (x, w, dy),
        "layernorm_fwd": (x, g, b, 1e-5),
        "layernorm_bwd": (dy, xhat, rstd, g),
        "xent_fwd": (logits, labels),
        "xent_bwd": (probs, labels, 1.0 / batch),
        "adam_update": (p, p * 0.1, m, v, 1e-3, 0.9, 0.999, 1e-8, 3),
        "sgd_update": (p, p * 0.1, 1e-2),
    }


def stage_time():
    from mera.harness.config import RunConfig
    from mera.harness.runner import build_datasets, stage_context
    from mera.harness.runner import initial_model
    from mera.clmethods import History, run_method_stage

    cfg = RunConfig(order=("image",))
    ds = build_datasets(cfg)
    t0 = time.perf_counter()
    run_method_stage(initial_model(cfg), ds["image"], History(), stage_context(cfg, 1), cfg.train)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-stage", action="store_true", help="only time the kernels")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"active backend: {K.BACKEND}")
    print(f"{'kernel':16s} {'shape':>12s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for batch, dim, classes in [(16, 16, 4), (256, 64, 8)]:
        for name, a in cases(batch, dim, classes, rng).items():
            t_np = _time(getattr(K, name + "_np"), a, args.repeat)
            t_nb = _time(getattr(K, name + "_nb"), a, args.repeat)
            print(f"{name:16s} {f'{batch}x{dim}':>12s} {t_np * 1e6:10.2f} {t_nb * 1e6:10.2f} {t_np / t_nb:8.2f}")
    if not args.skip_stage:
        print(f"one training stage ({K.BACKEND}): {stage_time():.2f}s")


if __name__ == "__main__":
    main()
