"""
Influence matrix of a spin chain
================================

Build the influence matrix (IM) of an XX chain as a matrix product state,
check it against brute-force evolution, and look at how much temporal
entanglement it carries.
"""

import numpy as np

from imlearn import ChainSpec, build_im_mps
from imlearn.dynamics import im_norm, temporal_entanglement_profile
from imlearn.environment import build_im_dense
from imlearn.tensor import densify, identity_closure

# A short chain is enough to compare with the dense construction.
spec = ChainSpec(model="XX", j=0.3, length=4, steps=2)
im = build_im_mps(spec)
print("bond dimensions:", im.bond_dims)
print("max deviation from dense IM:", np.abs(densify(im) - build_im_dense(spec)).max())

# Tracing every output leg against I/2 inputs gives one (trace preservation).
print("identity closure: %.12f" % identity_closure(im).real)

# Frobenius norm: 1 for a fully depolarizing bath, 2**t for a decoupled one.
print("IM norm: %.4f (bounds 1 and %d)" % (im_norm(im), 2**spec.steps))

# %%
# The desk-scale environment used for learning: t=8, 16 chain sites.
desk = build_im_mps(ChainSpec(model="XX", j=0.1, length=16, steps=8), chi_max=64)
print("desk bonds:", desk.bond_dims)
print("desk discarded weight: %.2e" % desk.discarded_weight)
for cut, s in enumerate(temporal_entanglement_profile(desk), start=1):
    print("  cut %d  temporal entanglement %.4f" % (cut, s))
