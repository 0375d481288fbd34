"""Time the compiled and pure-Python kernel backends on identical inputs.

Usage: python benchmarks/bench_kernels.py [--paths N] [--repeat R]
"""
import argparse
import timeit

import numpy as np

from mtpref import gen_random_cmdp, kernels


def inputs(n, seed=0):
    cmdp, _ = gen_random_cmdp(seed, 6, 8, 6, num_contexts=2)
    rng = np.random.default_rng(seed)
    w = rng.random(cmdp.reference_probs.shape) * cmdp.support
    probs = w / w.sum(-1, keepdims=True)
    H = cmdp.horizon
    data = {
        "pol_cdf": kernels.row_cdf(probs),
        "trans_cdf": kernels.row_cdf(cmdp.transitions),
        "contexts": rng.integers(0, cmdp.n_contexts, size=n).astype(np.int64),
        "uniforms": rng.random((n, 2 * H)),
        "rewards": rng.normal(size=(n, H)),
        "values": rng.normal(size=(n, H + 1)),
        "probs": probs,
    }
    return cmdp, data


def cases(mod, d):
    states, actions = (np.asarray(a) for a in mod.sample_paths(d["pol_cdf"], d["trans_cdf"], d["contexts"],
                                                               d["uniforms"]))
    H = actions.shape[1]
    c = np.repeat(d["contexts"], H)
    s = np.ascontiguousarray(states[:, :H].ravel())
    a = np.ascontiguousarray(actions.ravel())
    w = np.ones(s.size)
    grad = np.zeros_like(d["probs"])
    return {
        "sample_paths": lambda: mod.sample_paths(d["pol_cdf"], d["trans_cdf"], d["contexts"], d["uniforms"]),
        "gae": lambda: mod.gae(d["rewards"], d["values"], 0.95),
        "accumulate_logprob_grad": lambda: mod.accumulate_logprob_grad(c, s, a, w, d["probs"], grad),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--paths", type=int, default=20_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    _, data = inputs(args.paths)
    backends = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; {args.paths} paths, best of {args.repeat}")
    timings = {name: {k: min(timeit.repeat(f, number=1, repeat=args.repeat)) for k, f in cases(mod, data).items()}
               for name, mod in backends.items()}
    names = list(backends)
    print(f"{'kernel':<26}" + "".join(f"{n + ' (ms)':>16}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for k in timings["python"]:
        row = f"{k:<26}" + "".join(f"{1e3 * timings[n][k]:>16.3f}" for n in names)
        if "cython" in timings:
            row += f"{timings['python'][k] / timings['cython'][k]:>10.1f}x"
        print(row)


if __name__ == "__main__":
    main()
