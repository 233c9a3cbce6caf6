"""Time the numba kernels against the numpy fallbacks, then one training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--steps 20]

Kernel timings call both implementations directly. The training-step timing
runs a child process per backend (TPSKG_NUMBA=1 / 0) since the backend is
fixed at import time.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tpskg import _kernels as K

STEP_SNIPPET = r"""
import json, sys, time
import numpy as np
from tpskg import BACKEND
from tpskg.serialization import default_run_config
from tpskg.data import generate_dataset
from tpskg.training import build_trainer
cfg = default_run_config("full", 0, train_per_class=8, test_per_class=1)
tr, te, _ = generate_dataset(cfg.data)
t = build_trainer(cfg.model, cfg.train, tr, te)
t.step()  # warm-up (jit compile / cache load)
n = int(sys.argv[1])
start = time.perf_counter()
for _ in range(n):
    if t.batch_index >= t.steps_per_epoch:
        t.batch_index = 0
    t.step()
print(json.dumps({"backend": BACKEND, "ms_per_step": (time.perf_counter() - start) * 1000 / n}))
"""


def kernel_cases(rng):
    x = rng.normal(size=(8 * 4 * 17, 17)).astype(np.float32)     # attention logits, batch 8
    h = rng.normal(size=(8 * 17, 64)).astype(np.float32)          # token activations
    g, b = np.ones(64, np.float32), np.zeros(64, np.float32)
    hidden = rng.normal(size=(8 * 17, 256)).astype(np.float32)
    y = K.np_softmax_fwd(x)
    gy = rng.normal(size=x.shape).astype(np.float32)
    _, xhat, rstd = K.np_layernorm_fwd(h, g, b, 1e-6)
    avg = np.abs(rng.normal(size=(4, 17, 17)))
    avg /= avg.sum(axis=-1, keepdims=True)
    return {
        "softmax_fwd": ((x,), "softmax_fwd"),
        "softmax_bwd": ((y, gy), "softmax_bwd"),
        "layernorm_fwd": ((h, g, b, 1e-6), "layernorm_fwd"),
        "layernorm_bwd": ((h, xhat, rstd, g), "layernorm_bwd"),
        "gelu_fwd": ((hidden,), "gelu_fwd"),
        "gelu_bwd": ((hidden, hidden), "gelu_bwd"),
        "rollout": ((avg,), "rollout"),
    }


def bench_kernels(repeat: int) -> list[dict]:
    rows = []
    for name, (args, fn) in kernel_cases(np.random.default_rng(0)).items():
        np_fn = getattr(K, f"np_{fn}")
        nb_fn = getattr(K, f"nb_{fn}", None)
        row = {"kernel": name, "numpy_us": min(timeit.repeat(lambda: np_fn(*args), number=repeat, repeat=3)) / repeat * 1e6}
        if nb_fn is not None:
            nb_fn(*args)
            row["numba_us"] = min(timeit.repeat(lambda: nb_fn(*args), number=repeat, repeat=3)) / repeat * 1e6
        rows.append(row)
    return rows


def bench_steps(steps: int) -> list[dict]:
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, TPSKG_NUMBA=flag, TPSKG_THREADS="1", OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(steps)], env=env,
                             capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args(argv)

    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for r in bench_kernels(args.repeat):
        nb = r.get("numba_us")
        speed = f"{r['numpy_us'] / nb:9.2f}x" if nb else "       n/a"
        print(f"{r['kernel']:<16}{r['numpy_us']:12.1f}{(nb or float('nan')):12.1f}{speed}")
    print()
    for r in bench_steps(args.steps):
        print(f"training step (full mode, batch 8), {r['backend']:<6}: {r['ms_per_step']:.1f} ms")


if __name__ == "__main__":
    main()
