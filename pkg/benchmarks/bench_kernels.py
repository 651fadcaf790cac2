"""Time the numba kernels against their numpy fallbacks.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeat 50 --output bench.json
    python3 benchmarks/bench_kernels.py --end-to-end   # also time a small run-all per backend
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from geomtl import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # sizes match what the trainer and evaluator see at desk scale
    p = rng.normal(size=32 * 32)
    g = rng.normal(size=p.size)
    m, v = np.zeros(p.size), np.zeros(p.size)
    yield "adam_update (1024 params)", \
        lambda: kernels.adam_update_jit(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1), \
        lambda: kernels.adam_update_numpy(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)

    x = rng.normal(size=(256, 32))
    gamma, beta = np.ones(32), np.zeros(32)
    yield "bn_forward (256x32)", \
        lambda: kernels.bn_forward_jit(x, gamma, beta, 1e-5), \
        lambda: kernels.bn_forward_numpy(x, gamma, beta, 1e-5)

    fwd = kernels.bn_forward_numpy(x, gamma, beta, 1e-5)
    dy = rng.normal(size=x.shape)
    yield "bn_backward (256x32)", \
        lambda: kernels.bn_backward_jit(dy, fwd[1], gamma, fwd[4]), \
        lambda: kernels.bn_backward_numpy(dy, fwd[1], gamma, fwd[4])

    ranked = (rng.random(20_000) < 0.25).astype(np.int64)
    yield "ap_ranked (20k rows)", \
        lambda: kernels.ap_ranked_jit(ranked), \
        lambda: kernels.ap_ranked_numpy(ranked)

    s, edges = rng.random(20_000), np.linspace(0.0, 1.0, 21)
    yield "hist (20k scores, 20 bins)", \
        lambda: kernels.hist_jit(s, edges), \
        lambda: kernels.hist_numpy(s, edges)


def end_to_end():
    cfg = {"world": {"n_titles": 60, "population": 8000, "n_random_users": 1500, "n_active_upsample": 300,
                     "n_test_users": 800, "min_test_users_per_territory": 20, "daily_positives": 150},
           "eval": {"case_territories": 1, "max_ratio_gap": 1.0, "affinity_margin": 0.0,
                    "min_local_lean": 0.0, "min_title_positives": 1}}
    out = {}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cfg.json")
        with open(path, "w") as f:
            json.dump(cfg, f)
        for flag, name in (("1", "numba"), ("0", "numpy")):
            env = dict(os.environ, GEOMTL_NUMBA=flag)
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "geomtl", "run-all", "--config", path,
                            "--out", os.path.join(tmp, name)], env=env, check=True, capture_output=True)
            out[name] = time.perf_counter() - t0
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--output", help="write results as JSON")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':30s} {'numba (us)':>12s} {'numpy (us)':>12s} {'speedup':>8s}")
    for name, jit_fn, np_fn in cases(rng):
        jit_fn()  # compile (or load from cache) outside the timing
        tj, tn = best_of(jit_fn, args.repeat), best_of(np_fn, args.repeat)
        rows.append({"kernel": name, "numba_s": tj, "numpy_s": tn, "speedup": tn / tj})
        print(f"{name:30s} {tj * 1e6:12.1f} {tn * 1e6:12.1f} {tn / tj:8.2f}")

    result = {"backend": kernels.backend(), "kernels": rows}
    if args.end_to_end:
        result["run_all_s"] = end_to_end()
        for k, v in result["run_all_s"].items():
            print(f"run-all (small world, {k}): {v:.2f}s")
    if args.output:
        with open(args.output, "w") as f:
            json.dump(result, f, indent=2)


if __name__ == "__main__":
    main()
