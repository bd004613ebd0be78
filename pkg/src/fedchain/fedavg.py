"""Sample-count-weighted averaging of model updates.

The weighted sum is accumulated in exact integer arithmetic (every
float64 is a dyadic rational), with a single correctly-rounded division
by the total sample count at the end.  Consequences we rely on:

* every node derives a bit-identical aggregate from the same updates,
  regardless of summation order or platform;
* scaling all sample counts by a common factor cannot change the result;
* each component stays inside the convex hull of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import frexp

import numpy as np

from .params import ModelUpdate, ParameterVector


@dataclass(frozen=True)
class AggregateResult:
    params: ParameterVector
    total_samples: int
    contributor_count: int


def _exact_weighted_mean(counts: list[int], columns: list[np.ndarray], total: int) -> np.ndarray:
    dim = columns[0].shape[0]
    out = np.empty(dim, dtype=np.float64)
    for i in range(dim):
        terms = []
        for c, vec in zip(counts, columns):
            v = float(vec[i])
            if v == 0.0:
                continue
            fr, ex = frexp(v)
            # v == mant * 2**exp exactly; mant is a <=53-bit integer
            terms.append((c * int(fr * (1 << 53)), ex - 53))
        if not terms:
            out[i] = 0.0
            continue
        emin = min(e for _, e in terms)
        num = 0
        for mant, e in terms:
            num += mant << (e - emin)
        if emin >= 0:
            out[i] = (num << emin) / total
        else:
            out[i] = num / (total << -emin)
    return out


def aggregate(updates) -> AggregateResult:
    """Weighted mean of update parameters, weights = sample counts."""
    updates = list(updates)
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    dim = updates[0].params.dim
    counts = []
    columns = []
    for u in updates:
        if u.params.dim != dim:
            raise ValueError(f"dimension mismatch: {u.params.dim} vs {dim}")
        if u.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        counts.append(u.sample_count)
        columns.append(u.params.values)
    total = sum(counts)
    values = _exact_weighted_mean(counts, columns, total)
    return AggregateResult(ParameterVector(values), total, len(updates))


def aggregate_matches(updates, claimed, tol: float) -> bool:
    """True iff the recomputed aggregate is within tol of `claimed` everywhere.

    `claimed` may be a ParameterVector or a raw array; any NaN in it fails
    the check (fail closed on garbage, even though honest codecs reject
    non-finite values long before this point).
    """
    values = claimed.values if isinstance(claimed, ParameterVector) else np.asarray(claimed, dtype=np.float64)
    result = aggregate(updates)
    if values.shape != result.params.values.shape:
        return False
    diff = np.abs(result.params.values - values)
    return bool(np.all(diff <= tol))
