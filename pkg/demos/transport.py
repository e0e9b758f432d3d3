"""
Transport through a two-site impurity
=====================================

Two leads, each described by an IM, sandwich a two-qubit impurity.  With a
down-polarized left lead and an up-polarized right lead a magnetization
current flows.  A reset pulse at step 4 shows the memory of the leads.
"""

import numpy as np

from imlearn import ChainSpec, build_im_mps
from imlearn.channels import DOWN, PAULI_Z, UP, ImpuritySpec
from imlearn.dynamics import ControlSchedule, current, transport_trajectory
from imlearn.environment import depolarizing_im

t = 8
left = build_im_mps(ChainSpec(j=0.1, length=16, steps=t, initial_state="polarized_down"), chi_max=64)
right = build_im_mps(ChainSpec(j=0.1, length=16, steps=t, initial_state="polarized_up"), chi_max=64)

schedule = ControlSchedule.from_descriptors([ImpuritySpec(0.1, 0.1, 0.1)] * t, 2)
z_left = np.kron(PAULI_Z, np.eye(2))
traj = transport_trajectory(left, right, schedule, np.kron(DOWN, UP), {"Z_left": z_left})

print(" tau   <Z_left>   current")
for tau, (z, j) in enumerate(zip(traj.expectation(z_left)[1][1:].real, current(traj, z_left))):
    print("%4d  %9.5f  %9.5f" % (tau, z, j))

# %%
# Reset both impurity spins at step 4 and watch the left occupation refill.
# Depolarizing leads have no memory and give a flat response.
up_left = np.kron(UP, np.eye(2))
pulse = ControlSchedule.reset_protocol(ImpuritySpec(0.1, 0.1, 0.1), t, 4)
chain = build_im_mps(ChainSpec(j=0.5, length=16, steps=t, initial_state="polarized_up"), chi_max=64)
for label, lead in (("chain leads", chain), ("depolarizing leads", depolarizing_im(t))):
    tr = transport_trajectory(lead, lead, pulse, np.kron(UP, UP))
    occ = tr.expectation(up_left)[1][1:].real
    print(label.ljust(20), np.round(occ[4:], 5))
