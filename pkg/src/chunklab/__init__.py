"""chunklab: a desk-scale laboratory for learning on streams of data chunks.

The package covers the full loop: building identically distributed or
class-incremental chunk streams, training a from-scratch MLP through them
with plain SGD or experience replay, maintaining per-chunk weight averages
for evaluation, measuring forgetting and post-boundary stability dips, and
analysing the linear-regression case in closed form (Bayesian posterior
recursion, least-squares weight averaging, and an approximation bound
between the two).
"""

__version__ = "0.1.0"
