from __future__ import annotations

import math
from typing import Iterable


def percentile(values: Iterable[float], q: float) -> float:
    """Linear-interpolation percentile (numpy's default ``linear`` method).

    Written out explicitly so that the arithmetic is fixed: with ``h = (n-1)q/100``
    the result is ``x[lo] + (h - lo) * (x[lo+1] - x[lo])``.
    """
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("percentile of an empty collection")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {q}")
    h = (len(xs) - 1) * q / 100.0
    lo = int(math.floor(h))
    if lo >= len(xs) - 1:
        return xs[-1]
    return xs[lo] + (h - lo) * (xs[lo + 1] - xs[lo])
