"""Compare the compiled patch kernels with the numpy fallback.

Times ``im2col``/``col2im`` on the convolution shapes used by the desk-scale
model, then one full training step under each backend (in a subprocess, since
the backend is chosen at import time). Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 5]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from modinfuser import _kernels_py

try:
    from modinfuser import _kernels as _compiled
except ImportError:
    _compiled = None

# (batch, channels, size, kernel, stride): encoder/decoder/discriminator convs at 64x64
SHAPES = [
    (16, 1, 64, 7, 1),
    (16, 16, 64, 4, 2),
    (16, 32, 32, 4, 2),
    (16, 64, 8, 3, 1),
    (16, 64, 8, 4, 2),
]

STEP_SNIPPET = """
import time, numpy as np
from modinfuser.data import generate_phantom, PhantomSpec
from modinfuser.kernels import BACKEND
from modinfuser.model import Discriminator, Translator
from modinfuser.train import TrainConfig, Trainer
pack = generate_phantom(PhantomSpec(seed=0), 2, 8)
cfg = TrainConfig(batch_size=16)
tr = Trainer(Translator(cfg.model_config(4), seed=0), Discriminator(64, 4, seed=0), cfg)
src, dst = np.arange(16) % 4, (np.arange(16) + 1) % 4
tr.step(pack.images, src, dst)
t = time.perf_counter()
for _ in range({steps}):
    tr.step(pack.images, src, dst)
print(BACKEND, (time.perf_counter() - t) / {steps})
"""


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for b, c, size, k, s in SHAPES:
        pad = k // 2 if s == 1 else 1
        hp = size + 2 * pad
        ho = (hp - k) // s + 1
        xp = rng.normal(size=(b, c, hp, hp))
        cols = np.ascontiguousarray(_kernels_py.im2col(xp, k, k, s, ho, ho))
        row = {"shape": f"B{b} C{c} {size}px k{k} s{s}"}
        for name, mod in (("numpy", _kernels_py), ("compiled", _compiled)):
            if mod is None:
                continue
            row[f"im2col_{name}_ms"] = 1e3 * _time(lambda: np.ascontiguousarray(mod.im2col(xp, k, k, s, ho, ho)), repeat)
            row[f"col2im_{name}_ms"] = 1e3 * _time(lambda: mod.col2im(cols, b, c, hp, hp, k, k, s, ho, ho), repeat)
        rows.append(row)
    return rows


def bench_step(steps: int) -> dict[str, float]:
    out = {}
    for forced in ("0", "1"):
        env = {**os.environ, "MF_PURE_PYTHON": forced}
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    if _compiled is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    rows = bench_kernels(args.repeat)
    print(f"{'shape':<24}{'op':<8}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for row in rows:
        for op in ("im2col", "col2im"):
            py = row[f"{op}_numpy_ms"]
            cc = row.get(f"{op}_compiled_ms", float("nan"))
            print(f"{row['shape']:<24}{op:<8}{py:>10.3f}{cc:>13.3f}{py / cc:>9.2f}")
    step = bench_step(args.steps)
    print()
    for backend, secs in step.items():
        print(f"train step (batch 16, 64x64) {backend:<9}{1e3 * secs:9.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step_s": step}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
