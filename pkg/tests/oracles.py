"""Independent reference implementations shared by the test modules."""

import math


def brute_force_eer(target, nontarget):
    """Sweep every threshold with plain comparisons; interpolate at the first sign change."""
    thresholds = sorted(set(list(target) + list(nontarget))) + [math.inf]
    pm = [sum(1 for s in target if s < t) / len(target) for t in thresholds]
    pf = [sum(1 for s in nontarget if s >= t) / len(nontarget) for t in thresholds]
    for i, (m, f) in enumerate(zip(pm, pf)):
        if m - f >= 0:
            if m - f == 0 or i == 0:
                return m
            d0, d1 = pm[i - 1] - pf[i - 1], m - f
            return pm[i - 1] + (-d0 / (d1 - d0)) * (m - pm[i - 1])
    raise AssertionError("sweep never crossed")
