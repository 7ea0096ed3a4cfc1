"""Time the hot kernels under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each backend runs in its own interpreter because the choice is made at
import time through TRAFOREST_DISABLE_NUMBA.
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from traforest import _jit
from traforest import _kernels as K
from traforest.data import SurvData
from traforest.forest import ForestConfig, grow_forest
from traforest.likelihood import Responses
from traforest.tree import TreeConfig

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
n, q = 2000, 6
Zlo = rng.normal(size=(n, q)) * 0.3
Zhi = Zlo + np.abs(rng.normal(size=(n, q))) * 0.3
Zd = np.abs(rng.normal(size=(n, q)))
kind = rng.integers(0, 4, size=n).astype(np.int64)
Zhi[kind == 0] = Zlo[kind == 0]
w = np.ones(n)
gamma = np.full(q, 0.2)
s = rng.normal(size=(n, q))
x = rng.uniform(size=n)
order = np.argsort(x, kind="mergesort")
vp = np.linalg.pinv(s.T @ s)
leaf_q = rng.integers(0, 40, size=500)
leaf_t = rng.integers(-1, 40, size=n)
W = np.zeros((500, n))
X = rng.uniform(size=(300, 5))
t = np.exp(np.log(rng.exponential(size=300)) - 1.5 * X[:, 0])
data = SurvData(Responses.exact_times(t), X)
cfg = ForestConfig(n_trees=10, tree=TreeConfig(max_depth=4, min_node=20), master_seed=1)

cases = {
    "objective (n=2000, q=6)": lambda: K._objective(gamma, Zlo, Zhi, Zd, kind, w, float(n)),
    "split scan (n=2000, q=6)": lambda: K._scan(s, x, order, vp, 20),
    "co-membership (500 x 2000)": lambda: K._cooccur(leaf_q, leaf_t, W),
    "grow 10 trees (N=300)": lambda: grow_forest(data, cfg),
}
out = {"numba": _jit.USE_NUMBA}
for name, fn in cases.items():
    fn()  # warm-up, includes compilation
    reps = repeat if not name.startswith("grow") else max(1, repeat // 10)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    out[name] = (time.perf_counter() - t0) / reps
print(json.dumps(out))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("TRAFOREST_DISABLE_NUMBA", None)
    if disable:
        env["TRAFOREST_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    if not fast.pop("numba"):
        print("numba is not available; both columns use numpy")
    slow.pop("numba")
    print(f"{'kernel':<30}{'numba [ms]':>12}{'numpy [ms]':>12}{'ratio':>8}")
    for name in fast:
        a, b = 1e3 * fast[name], 1e3 * slow[name]
        print(f"{name:<30}{a:>12.3f}{b:>12.3f}{b / a:>8.1f}")


if __name__ == "__main__":
    main()
