"""Time the numba and pure-numpy kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are imported directly, so the ``WAVEPESQ_NUMBA`` flag does not
matter here. Each kernel is warmed up once (JIT compile) before timing, and
outputs are cross-checked before anything is reported.
"""
import argparse
import timeit

import numpy as np

from wavepesq import kernels
from wavepesq._accel import HAVE_NUMBA


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def conv_cases(rng):
    # (channels_in, channels_out, T, K, dilation)
    for c, o, t, k, d in [(2, 8, 512, 1, 1), (8, 8, 512, 4, 16), (16, 16, 512, 4, 64), (32, 32, 4095, 2, 256)]:
        x = rng.standard_normal((c, t))
        w = rng.standard_normal((o, c, k))
        b = rng.standard_normal(o)
        g = rng.standard_normal((o, t))
        yield f"conv c={c} o={o} T={t} K={k} d={d}", x, w, b, g, d


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ns = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy kernels can run")
    rng = np.random.default_rng(0)
    rows = []

    for label, x, w, b, g, d in conv_cases(rng):
        for kind, fns in (
            ("fwd", (lambda: kernels.conv_forward_numpy(x, w, b, d), lambda: kernels.conv_forward_numba(x, w, b, d))),
            ("bwd", (lambda: kernels.conv_backward_numpy(x, w, g, d), lambda: kernels.conv_backward_numba(x, w, g, d))),
        ):
            ref, fast = fns[0](), fns[1]()  # warm-up also compiles
            ref = ref if isinstance(ref, tuple) else (ref,)
            fast = fast if isinstance(fast, tuple) else (fast,)
            assert all(np.allclose(a, c, rtol=1e-10, atol=1e-10) for a, c in zip(ref, fast)), label
            rows.append((f"{label} {kind}", _best(fns[0], ns.repeat, ns.number), _best(fns[1], ns.repeat, ns.number)))

    for n in (512, 4096, 65536, 1 << 18):
        a = rng.standard_normal(n) + 1j * rng.standard_normal(n)

        def run_np(a=a):
            kernels.fft_inplace_numpy(a.copy(), False)

        def run_nb(a=a):
            kernels.fft_inplace_numba(a.copy(), False)

        r1, r2 = a.copy(), a.copy()
        kernels.fft_inplace_numpy(r1, False)
        kernels.fft_inplace_numba(r2, False)
        assert np.allclose(r1, r2, rtol=1e-10, atol=1e-8 * np.sqrt(n))
        number = max(1, ns.number * 512 // n)
        rows.append((f"fft N={n}", _best(run_np, ns.repeat, number), _best(run_nb, ns.repeat, number)))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:10.4f}  {t_nb * 1e3:10.4f}  {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
