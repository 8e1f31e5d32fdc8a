"""Pure-Python implementations of the loops compiled in ``_kernels.pyx``.

Both modules expose the same functions with the same results; see
:mod:`mtplm.kernels` for selection.
"""

import numpy as np


def apply_spans(ids, starts, lengths, prefix, eos, sentinel_offset):
    enc = [prefix]
    tgt = []
    pos = 0
    for s, (start, length) in enumerate(zip(starts.tolist(), lengths.tolist())):
        enc.extend(ids[pos:start].tolist())
        enc.append(sentinel_offset + s)
        tgt.append(sentinel_offset + s)
        tgt.extend(ids[start:start + length].tolist())
        pos = start + length
    enc.extend(ids[pos:].tolist())
    enc.append(eos)
    tgt.append(eos)
    return np.asarray(enc, dtype=np.int64), np.asarray(tgt, dtype=np.int64)


def splice_spans(enc, tgt, sentinel_offset, num_sentinels):
    def is_sent(tok):
        return 0 <= tok - sentinel_offset < num_sentinels

    tgt = tgt.tolist()
    out = []
    j, last = 0, -1
    for tok in enc.tolist():
        if not is_sent(tok):
            out.append(tok)
            continue
        k = tok - sentinel_offset
        if k <= last or j >= len(tgt) or tgt[j] != tok:
            return None
        last = k
        j += 1
        while j < len(tgt) and not is_sent(tgt[j]):
            out.append(tgt[j])
            j += 1
    if j != len(tgt):
        return None
    return np.asarray(out, dtype=np.int64)


def average_ranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks
