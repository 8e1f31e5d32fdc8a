"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the pure-Python
fallback is imported. Set ``MTPLM_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

if os.environ.get("MTPLM_PURE_PYTHON") == "1":
    from . import _fallback as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        from . import _fallback as _impl

BACKEND = "compiled" if _impl.__name__.endswith("_kernels") else "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def apply_spans(ids, starts, lengths, prefix, eos, sentinel_offset):
    return _impl.apply_spans(_i64(ids), _i64(starts), _i64(lengths),
                             int(prefix), int(eos), int(sentinel_offset))


def splice_spans(enc, tgt, sentinel_offset, num_sentinels):
    return _impl.splice_spans(_i64(enc), _i64(tgt), int(sentinel_offset), int(num_sentinels))


def average_ranks(x):
    return _impl.average_ranks(np.ascontiguousarray(x, dtype=np.float64))


def backend_module(name):
    """Return the named backend module ("compiled" or "python")."""
    if name == "python":
        from . import _fallback
        return _fallback
    from . import _kernels
    return _kernels
