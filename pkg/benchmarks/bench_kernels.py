"""Compare the compiled and numpy leapfrog kernels on a freshly initialised decoder.

    python3 benchmarks/bench_kernels.py [--steps 200] [--batches 1 20 200]

Prints one line per (backend, batch size) with microseconds per leapfrog step,
plus the largest absolute difference between the two backends' final states.
"""

import argparse
import time

import numpy as np

from vaeguard import kernels, vae


def time_leapfrog(mod, z, p, grad, x, weights, biases, eta, steps, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = mod.leapfrog(z, p, grad, x, weights, biases, 0, eta, steps)
        best = min(best, time.perf_counter() - t0)
    return best / steps * 1e6, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--batches", type=int, nargs="+", default=[1, 20, 200])
    parser.add_argument("--input-dim", type=int, default=196)
    parser.add_argument("--latent", type=int, default=16)
    args = parser.parse_args(argv)

    backends = ["python"]
    try:
        kernels.get_backend("compiled")
        backends.append("compiled")
    except ImportError:
        print("compiled backend unavailable; timing numpy only")

    model = vae.init_model(args.input_dim, args.latent, seed=0)
    weights = [w for w, _ in model.decoder]
    biases = [b for _, b in model.decoder]
    rng = np.random.default_rng(0)
    print(f"{'backend':>9} {'batch':>6} {'us/step':>10} {'speedup':>8}")
    for batch in args.batches:
        z = rng.standard_normal((batch, args.latent))
        p = rng.standard_normal((batch, args.latent))
        x = (rng.uniform(size=(batch, args.input_dim)) < 0.3).astype(float)
        eta = np.full(batch, 0.05)
        _, grad = kernels.get_backend("python").decoder_potential(z, x, weights, biases, 0)
        results = {}
        for name in backends:
            results[name] = time_leapfrog(kernels.get_backend(name), z, p, grad, x,
                                          weights, biases, eta, args.steps, args.repeats)
        base = results["python"][0]
        for name in backends:
            us = results[name][0]
            print(f"{name:>9} {batch:>6} {us:>10.1f} {base / us:>7.2f}x")
        if "compiled" in results:
            diff = max(np.max(np.abs(a - b)) for a, b in zip(results["python"][1], results["compiled"][1]))
            print(f"{'':>9} {batch:>6} max |diff| = {diff:.2e}")


if __name__ == "__main__":
    main()
