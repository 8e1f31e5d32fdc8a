"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time per call of each backend.
"""
import argparse
import statistics
import timeit

import numpy as np

from mtplm import objectives, vocab
from mtplm.kernels import backend_module


def inputs(seed=0, length=512, p=0.15):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 20, size=length) + vocab.RESIDUE_OFFSET
    spans = objectives.sample_spans(length, p, objectives.ObjectiveConfig(), rng)
    starts = np.array([s for s, _ in spans], dtype=np.int64)
    lengths = np.array([n for _, n in spans], dtype=np.int64)
    return ids.astype(np.int64), starts, lengths, rng.normal(size=length).round(1)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--number", type=int, default=200)
    args = parser.parse_args()

    ids, starts, lengths, scores = inputs()
    try:
        backends = {"compiled": backend_module("compiled")}
    except ImportError:
        backends = {}
        print("compiled extension not built; timing the fallback only")
    backends["python"] = backend_module("python")

    enc, tgt = backends["python"].apply_spans(ids, starts, lengths, vocab.NLU, vocab.EOS, vocab.SENTINEL_OFFSET)
    body = enc[1:-1]  # drop prefix and eos, as reconstruct does
    cases = {
        "apply_spans": lambda m: m.apply_spans(ids, starts, lengths, vocab.NLU, vocab.EOS, vocab.SENTINEL_OFFSET),
        "splice_spans": lambda m: m.splice_spans(body, tgt[:-1], vocab.SENTINEL_OFFSET, vocab.NUM_SENTINELS),
        "average_ranks": lambda m: m.average_ranks(scores),
    }
    print(f"{'kernel':<15}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for kernel, call in cases.items():
        times = {}
        for name, mod in backends.items():
            runs = timeit.repeat(lambda: call(mod), number=args.number, repeat=args.repeat)
            times[name] = statistics.median(runs) / args.number
        speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{kernel:<15}" + "".join(f"{t * 1e6:>11.1f} us" for t in times.values()) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
