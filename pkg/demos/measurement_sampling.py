"""
SIC-POVM measurement strings
============================

An ancilla qubit is coupled to the environment, measured with the
tetrahedral SIC-POVM before and after each step, and the outcome strings
are sampled exactly from the IM.
"""

import numpy as np

from imlearn import ChainSpec, build_im_mps
from imlearn.measurement import empirical_distribution, exact_distribution, sample_dataset, sic_povm

povm = sic_povm()
m = povm.matrices()
print("sum of elements equals identity:", np.array_equal(m.sum(axis=0), np.eye(2)))
print("overlaps Tr(M_a M_b):")
print(np.round(np.einsum("aij,bji->ab", m, m).real, 6))

# %%
# Exact distribution of all 4**(2t) strings at t=2 and its empirical estimate.
im = build_im_mps(ChainSpec(model="XX", j=0.4, length=4, steps=2))
exact = exact_distribution(im)
ds = sample_dataset(im, 100_000, seed=0)
emp = empirical_distribution(ds.segments[0][1])
print("total probability:", exact.sum())
print("total variation distance to the sample: %.4f" % (0.5 * np.abs(exact - emp).sum()))

# %%
# Coarse graining keeps the ancilla coupled for two steps between readouts.
coarse = exact_distribution(im, grain=2)
print("coarse-grained distribution shape:", coarse.shape, "sum:", coarse.sum())
