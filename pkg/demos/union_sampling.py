"""
Union sampling of concept subsets
=================================

Each training step picks a nonempty subset of the scene's concepts: first a
size uniformly, then a subset of that size uniformly.  Here the empirical
frequencies are compared with the exact law.
"""
from collections import Counter
from itertools import combinations

import numpy as np

from scenedecomp.concepts import build_prompt, subset_probability, union_sample

n = 3
rng = np.random.default_rng(0)
draws = 20000
counts = Counter(tuple(union_sample(rng, n)) for _ in range(draws))

handles = [f"[v{i + 1}]" for i in range(n)]
print("%-32s %8s %8s" % ("prompt", "freq", "law"))
for k in range(1, n + 1):
    for s in combinations(range(n), k):
        print("%-32s %8.4f %8.4f" % (build_prompt(s, handles), counts[s] / draws,
                                     subset_probability(s, n)))
# the full set gets a third of the mass because the size is drawn first
