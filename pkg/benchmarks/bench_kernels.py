"""Compare the compiled element kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 16 24 32] [--repeat 5]

Both backends are imported directly, so the result does not depend on
NTDRECON_PURE_PYTHON.  Prints best-of-repeat wall times, the speedup and
the largest absolute difference between the two outputs.
"""

import argparse
import time

import numpy as np

from ntdrecon import _kernels_py as py
from ntdrecon.mesh import build_box_mesh

try:
    from ntdrecon import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(mesh, rng):
    v = np.ascontiguousarray(mesh.vertices)
    t = np.ascontiguousarray(mesh.tets, dtype=np.int64)
    grads, vol = py.p1_gradients(v, t)
    m = len(t)
    a = rng.standard_normal((m, 3, 3))
    gam = np.ascontiguousarray(np.einsum("mij,mkj->mik", a, a) + np.eye(3))
    q = rng.random((m, 4))
    u = rng.standard_normal((m, 4))
    alpha = rng.random(m) + 0.5
    return {
        "p1_gradients": (v, t),
        "stiffness_local": (grads, vol, gam),
        "quad_mass_local": (q, vol),
        "cubic_terms": (u, alpha, vol),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[16, 24, 32])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not available; only the numpy backend can run")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'tets':>8} {'numpy [ms]':>11} {'cython [ms]':>12} {'speedup':>8} {'max diff':>10}")
    for n in args.n:
        mesh = build_box_mesh((1.0, 1.0, 1.0), n)
        for name, inputs in cases(mesh, rng).items():
            tp, op = best_of(lambda: getattr(py, name)(*inputs), args.repeat)
            if cy is None:
                print(f"{name:<16} {len(mesh.tets):>8} {1e3 * tp:>11.2f} {'-':>12} {'-':>8} {'-':>10}")
                continue
            tc, oc = best_of(lambda: getattr(cy, name)(*inputs), args.repeat)
            print(f"{name:<16} {len(mesh.tets):>8} {1e3 * tp:>11.2f} {1e3 * tc:>12.2f} "
                  f"{tp / tc:>8.1f} {max_diff(op, oc):>10.2e}")


if __name__ == "__main__":
    main()
