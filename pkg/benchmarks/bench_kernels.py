"""Compare the numba kernels with their numpy references.

    python benchmarks/bench_kernels.py [--repeat 20]

Part one times each kernel in this process against ``kernels.NUMPY_KERNELS``
(and checks the outputs agree). Part two runs an end-to-end workload in two
subprocesses, one with ``COMATCH_NUMBA=0``, since the backend is fixed at
import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from comatch import kernels


def cases(rng):
    x = rng.random((32, 64, 16, 16))
    cols = kernels.im2col(x)
    pooled, arg = kernels.maxpool2x2(x)
    imgs = rng.random((128, 3, 32, 32)).astype(np.float32)
    theta = rng.uniform(-0.5, 0.5, 128)
    mats = np.zeros((128, 2, 3))
    mats[:, 0, 0] = mats[:, 1, 1] = np.cos(theta)
    mats[:, 0, 1], mats[:, 1, 0] = -np.sin(theta), np.sin(theta)
    mats[:, :, 2] = 4.0
    levels = (imgs * 255).astype(np.int64)
    return {
        "im2col": (x,),
        "col2im": (cols, x.shape),
        "maxpool2x2": (x,),
        "maxpool2x2_backward": (np.ones_like(pooled), arg),
        "warp_bilinear": (imgs, mats),
        "equalize_levels": (levels,),
        "counter_uniforms": (12345, np.arange(4096), 11),
    }


def best_ms(fn, args, repeat):
    fn(*args)  # compile / warm up
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1000


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  outputs")
    for name, args in cases(rng).items():
        fast, ref = getattr(kernels, name), kernels.NUMPY_KERNELS[name]
        a, b = fast(*args), ref(*args)
        a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
        same = all(np.allclose(p, q, rtol=1e-12, atol=1e-12) for p, q in zip(a, b))
        t_fast, t_ref = best_ms(fast, args, repeat), best_ms(ref, args, repeat)
        print(f"{name:22s} {t_fast:10.3f} {t_ref:10.3f} {t_ref / t_fast:7.1f}x  {'match' if same else 'DIFFER'}")


WORKLOAD = r"""
import json, time, numpy as np
from comatch import augment, kernels, lab
from comatch.cotrain import Trainer
imgs = np.random.default_rng(0).random((128, 3, 32, 32)).astype(np.float32)
weak, strong = augment.AugmentationPolicy("weak"), augment.AugmentationPolicy("strong")
augment.augment_batch(imgs, np.arange(128), strong, 0, 0, 1)
t = time.perf_counter()
for epoch in range(20):
    augment.augment_batch(imgs, np.arange(128), weak, 0, epoch, 0)
    augment.augment_batch(imgs, np.arange(128), strong, 0, epoch, 1)
aug_ms = (time.perf_counter() - t) / 20 * 1000
cfg = lab.ExperimentConfig(epochs=1, lr_decay_start=0, checkpoint=False)
train, test, _ = lab.load_data(cfg)
trainer = Trainer(cfg.train_config(), train, test, lab.network_builder(cfg, train), cfg.policies(16))
t = time.perf_counter()
trainer.run_epoch(0, evaluate=False)
print(json.dumps({"numba": kernels.NUMBA_ENABLED, "aug_pair_ms": aug_ms,
                  "epoch_s": time.perf_counter() - t}))
"""


def end_to_end():
    print("\nend to end (weak+strong views of 128 images at 32x32; one desk-scale co-matching epoch)")
    for flag in ("1", "0"):
        env = dict(os.environ, COMATCH_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", WORKLOAD], env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        label = "numba" if r["numba"] else "numpy"
        print(f"  {label:6s} augment pair {r['aug_pair_ms']:7.2f} ms   epoch {r['epoch_s']:6.2f} s")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--skip-end-to-end", action="store_true")
    args = p.parse_args()
    if not kernels.NUMBA_ENABLED:
        sys.exit("numba backend is disabled (COMATCH_NUMBA=0 or numba missing); nothing to compare")
    kernel_table(args.repeat)
    if not args.skip_end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
