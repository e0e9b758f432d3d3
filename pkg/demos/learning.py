"""
Learning an influence matrix from measurements
==============================================

Fit the uniform Stinespring ansatz to sampled strings by Riemannian ADAM and
compare the result with the generating IM.  Sizes are kept small so the
script runs in about a minute; the desk-scale experiment (t=8, N=2e5) is in
``configs/xx_t8.json``.
"""

from imlearn import ChainSpec, TrainConfig, ansatz_to_im, build_im_mps, sample_dataset, train
from imlearn.dynamics import infidelity, prediction_error

spec = ChainSpec(model="XX", j=0.1, length=8, steps=4)
true_im = build_im_mps(spec)
data = sample_dataset(true_im, 20_000, seed=1)

config = TrainConfig(batch_size=2000, epochs=30, lr_initial=0.25, lr_final=1e-3, m=2, r=8)


def report(result):
    e = result.epochs_done
    if e % 10 == 0:
        print("epoch %3d  mean NLL %.5f  lr %.2e" % (e, result.history.mean_nll[-1], result.history.lr[-1]))


result = train(data, config, callback=report)
learned = ansatz_to_im(result.ansatz, spec.steps)

print("infidelity: %.4f" % infidelity(true_im, learned))
print("prediction error on 200 Haar sequences: %.4f" % prediction_error(true_im, learned, 200))
print("isometry defect: %.1e" % result.ansatz.isometry_defect())
