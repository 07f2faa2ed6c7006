#!/usr/bin/env python3
"""Paired significance of two accuracy lists with the signed-rank test.

Ten runs of two models on the same splits: the exact null distribution is
built by enumerating sign assignments, and the p-value is compared with the
figure reached by listing all 2^n assignments directly.
"""
from itertools import product

import numpy as np
from scipy.stats import rankdata

from mpcaps.stats import wilcoxon_signed_rank

multi = [0.9956, 0.9951, 0.9958, 0.9949, 0.9953, 0.9960, 0.9947, 0.9955, 0.9952, 0.9957]
single = [0.9950, 0.9952, 0.9949, 0.9944, 0.9950, 0.9953, 0.9948, 0.9946, 0.9951, 0.9950]

res = wilcoxon_signed_rank(multi, single)
print(f"W+ = {res.w_plus}, W- = {res.w_minus}, statistic {res.statistic}, n = {res.n}")
print(f"two-sided p = {res.p_value:.6f} ({res.method})")

d = np.array(multi) - np.array(single)
d = d[d != 0]
ranks = rankdata(np.abs(d))
hits = sum(min(w, ranks.sum() - w) <= res.statistic
           for w in (np.dot(signs, ranks) for signs in product((0, 1), repeat=len(d))))
print(f"brute force over {2 ** len(d)} sign patterns: p = {hits / 2 ** len(d):.6f}")
for alpha in (0.05, 0.01):
    verdict = "reject" if res.p_value < alpha else "retain"
    print(f"alpha {alpha}: {verdict} equal medians")
