"""Log-space binomial weights and two-sided tail membership, shared by the
branch ledger, the frequency-counting student rule, and the tail checks."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

# Cutoffs n*(p - eps) and n*(p + eps) are mathematically integers on the
# round-number parameter grids we care about, but float products land a few
# ulp off.  Counts within this relative slack of the cutoff are treated as
# sitting exactly on it, so the boundary count is included in the tail.
CUTOFF_GUARD = 1e-9


def tail_cutoffs(n: int, p: float, eps: float) -> tuple[float, float]:
    """Return (lower, upper) count cutoffs for the two-sided tail."""
    return n * (p - eps), n * (p + eps)


def tail_mask(n: int, p: float, eps: float) -> np.ndarray:
    """Boolean mask over m = 0..n marking counts in either tail.

    Lower tail: m <= n*(p - eps); upper tail: m >= n*(p + eps), boundaries
    included.  The complement is the frequency band |m/n - p| < eps.
    """
    lo, hi = tail_cutoffs(n, p, eps)
    guard = CUTOFF_GUARD * max(1.0, float(n))
    m = np.arange(n + 1)
    return (m <= lo + guard) | (m >= hi - guard)


def in_tail(m: int, n: int, p: float, eps: float) -> bool:
    """Scalar version of tail_mask for a single count m."""
    lo, hi = tail_cutoffs(n, p, eps)
    guard = CUTOFF_GUARD * max(1.0, float(n))
    return m <= lo + guard or m >= hi - guard


def log_comb(n: int) -> np.ndarray:
    """log C(n, m) for m = 0..n via log-gamma."""
    m = np.arange(n + 1, dtype=float)
    return gammaln(n + 1.0) - gammaln(m + 1.0) - gammaln(n - m + 1.0)


def log_outcome_weight(n: int, p: float) -> np.ndarray:
    """log of p^m (1-p)^(n-m) for m = 0..n, with exact handling of p in {0, 1}."""
    m = np.arange(n + 1, dtype=float)
    if p == 0.0:
        out = np.full(n + 1, -np.inf)
        out[0] = 0.0
        return out
    if p == 1.0:
        out = np.full(n + 1, -np.inf)
        out[n] = 0.0
        return out
    return m * np.log(p) + (n - m) * np.log1p(-p)


def log_pmf(n: int, p: float) -> np.ndarray:
    """log of the binomial(n, p) probability mass function over m = 0..n."""
    return log_comb(n) + log_outcome_weight(n, p)
