"""Compare the numba and numpy kernel backends.

Per-kernel timings use both backend modules directly on the shapes a 96x96
forward pass produces. The end-to-end row runs a forward+backward episode in
a subprocess per backend, since the active backend is fixed at import.

    python3 benchmarks/bench_kernels.py [--reps 50] [--csv out.csv]
"""

import argparse
import csv
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from dcama.kernels import get_backend

E2E_SNIPPET = """
import json, time, statistics
import numpy as np
from dcama import kernels, tensor as T
from dcama.episodes import ToyDatasetConfig, generate_toy_dataset, make_folds, sample_episode
from dcama.evaluation import bce_loss
from dcama.pipeline import ModelConfig, ModelWeights, forward, prepare_episode
ds = generate_toy_dataset(ToyDatasetConfig(num_classes=2, images_per_class=6), seed=0)
ep = sample_episode(ds, make_folds(ds.classes, 1)[0], 1, np.random.default_rng(0))
cfg = ModelConfig()
w = ModelWeights.init(cfg, 0)
feats = prepare_episode(ep, cfg)
leaves = [w.params[k] for k in w.names()]
def step():
    prob, _ = forward(feats, w)
    T.backward(bce_loss(prob, feats.query_mask), leaves)
step()
times = []
for _ in range({reps}):
    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "median_s": statistics.median(times)}}))
"""


def cases(rng):
    x = rng.normal(size=(98, 98, 16)).astype(np.float32)
    cols = rng.normal(size=(48 * 48, 9 * 16)).astype(np.float32)
    small = rng.normal(size=(24, 24, 128)).astype(np.float32)
    big = rng.normal(size=(96, 96, 16)).astype(np.float32)
    scores = rng.normal(size=(144, 288)).astype(np.float32)
    values = rng.uniform(size=96 * 96)
    pred = rng.random((96, 96)) < 0.4
    gt = rng.random((96, 96)) < 0.4
    return [
        ("im2col 98x98x16 s2", "im2col", (x, 3, 3, 2, 48, 48)),
        ("col2im 48x48 -> 98x98x16", "col2im", (cols, 98, 98, 16, 3, 3, 2, 48, 48)),
        ("resize 24x24x128 -> 96x96", "resize_forward", (small, 96, 96)),
        ("resize backward 96x96x16 -> 24x24", "resize_backward", (big, 24, 24)),
        ("softmax 144x288", "softmax_rows", (scores,)),
        ("histogram 9216", "histogram256", (values, 0.0, 1.0)),
        ("confusion 96x96", "confusion", (pred, gt)),
    ]


def time_call(fn, args, reps):
    fn(*args)  # warm-up (and JIT compile)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def end_to_end(backend, reps):
    env = dict(os.environ, DCAMA_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-c", E2E_SNIPPET.format(reps=reps)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout.strip().splitlines()[-1])["median_s"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--e2e-reps", type=int, default=10)
    p.add_argument("--skip-e2e", action="store_true")
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)

    fast, ref = get_backend("numba"), get_backend("numpy")
    rows = []
    for label, name, call_args in cases(np.random.default_rng(0)):
        t_nb = time_call(getattr(fast, name), call_args, args.reps)
        t_np = time_call(getattr(ref, name), call_args, args.reps)
        rows.append({"kernel": label, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})
    if not args.skip_e2e:
        t_nb, t_np = end_to_end("numba", args.e2e_reps), end_to_end("numpy", args.e2e_reps)
        rows.append({"kernel": "episode fwd+bwd 96x96", "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})

    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:36s} {r['numba_s'] * 1e3:10.3f} {r['numpy_s'] * 1e3:10.3f} {r['speedup']:8.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
