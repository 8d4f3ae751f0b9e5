"""Time the numba and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--tokens 128]

Numba compilation happens in a warm-up call outside the timed region. Each
row also reports the largest absolute difference between the two backends.
"""

import argparse
import timeit

import numpy as np

from loopdyn.kernels import numpy_impl

try:
    from loopdyn.kernels import numba_impl
except ImportError:  # numba missing
    numba_impl = None


def cases(t: int, d: int, rng: np.random.Generator):
    logits = rng.standard_normal((4, t, t))
    x = rng.standard_normal((t, d))
    gain = rng.uniform(0.5, 1.5, d)
    a = rng.standard_normal((64, 64))
    sym = 0.5 * (a + a.T)
    series = rng.standard_normal(1024)
    attn = numpy_impl.softmax_rows(logits, True)
    return {
        "softmax_rows": lambda m: m.softmax_rows(logits, True),
        "rms_norm": lambda m: m.rms_norm(x, gain, 1e-6),
        "layer_norm": lambda m: m.layer_norm(x, gain, 1e-6),
        "jacobi_eigh 64": lambda m: m.jacobi_eigh(sym, 1e-14, 64)[0],
        "fft_radix2 1024": lambda m: m.fft_radix2(series),
        "colsum_concentration": lambda m: m.colsum_concentration(attn),
        "mixing_score": lambda m: m.mixing_score(attn),
        "sink_scores": lambda m: m.sink_scores(attn),
    }


def best_of(fn, repeat: int) -> float:
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--tokens", type=int, default=128)
    ap.add_argument("--width", type=int, default=512)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, call in cases(args.tokens, args.width, rng).items():
        t_np = best_of(lambda: call(numpy_impl), args.repeat)
        if numba_impl is None:
            print(f"{name:<22}{1e3 * t_np:>12.3f}{'-':>12}{'-':>9}{'-':>12}")
            continue
        ref, got = call(numpy_impl), call(numba_impl)  # also compiles
        t_nb = best_of(lambda: call(numba_impl), args.repeat)
        diff = float(np.max(np.abs(np.asarray(ref) - np.asarray(got))))
        print(f"{name:<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>8.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
