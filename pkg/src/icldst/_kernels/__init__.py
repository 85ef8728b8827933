"""Retrieval score kernels.

The hot loop of retrieval is the dot-product scan over the whole training
store. A Cython extension provides it when built; otherwise (or when
ICLDST_PURE_KERNELS=1 is set) the numpy implementation is used. Both
accumulate in float64 and round to float32, so rankings agree.
"""

import os

from . import pure

if os.environ.get("ICLDST_PURE_KERNELS"):
    dot_scores = pure.dot_scores
    BACKEND = "pure"
else:
    try:
        from ._scan import dot_scores  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        dot_scores = pure.dot_scores
        BACKEND = "pure"

__all__ = ["dot_scores", "BACKEND", "pure"]
