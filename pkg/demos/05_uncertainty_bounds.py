"""Monte Carlo volumetric uncertainty: percentile curves, calibration and
IQR bounds, plus a small acquisition-parameter sweep.

Uses a quick-trained network; the point is the machinery, not absolute
quality. Writes sweep_demo.svg next to this script.
"""

import os

import numpy as np

from physseg import (Mprage, SweepGrid, TrainConfig, calibrate, fit_gmm,
                     generate_phantom, iqr_bounds, label_pgs,
                     percentile_volumes, predict, sweep_contour, train)
from physseg.model import MlpConfig
from physseg import svgplot

HERE = os.path.dirname(os.path.abspath(__file__))

subjects = []
for i in range(4):
    mpm, _ = generate_phantom(seed=[17, i], dims=(28, 28, 28), subject_id=f"u{i}")
    soft, _ = label_pgs(mpm, fit_gmm(mpm))
    subjects.append((mpm, soft))

config = TrainConfig(mode="phys_strat_aug", patch_size=(14, 14, 14),
                     steps_per_epoch=25, max_epochs=6, patience=7, seed=2,
                     n_val_realizations=3,
                     mlp=MlpConfig(hidden_widths=(48, 48, 32), embed_widths=(16, 16)))
weights, _ = train(config, subjects[:2], subjects[2:3])

# Monte Carlo sampling on the held-out subject
mpm, soft = subjects[3]
true_gm = soft.harden().volume_ml("gm")
params = Mprage(900.0, 800.0)
samples = predict(weights, mpm, params, n_samples=30, dropout=True,
                  rng=np.random.default_rng(5))
curve = percentile_volumes(samples, "gm")
print(f"GM percentile-volume curve: {curve.volumes_ml[0]:.2f} ml at q=1 "
      f"down to {curve.volumes_ml[-1]:.2f} ml at q=99 (truth {true_gm:.2f} ml)")

# calibrate on the other subjects, then report IQR bounds
curves, truths = [], []
for cal_mpm, cal_soft in subjects[:3]:
    for k, ti in enumerate((700.0, 1000.0)):
        s = predict(weights, cal_mpm, Mprage(ti, 800.0), n_samples=30,
                    dropout=True, rng=np.random.default_rng([9, k]))
        curves.append(percentile_volumes(s, "gm"))
        truths.append(cal_soft.harden().volume_ml("gm"))
cal_map = calibrate(curves, truths)
lo, mid, hi = iqr_bounds(curve, cal_map)
print(f"calibrated IQR bounds: [{lo:.2f}, {hi:.2f}] ml around {mid:.2f} ml; "
      f"truth inside: {lo <= true_gm <= hi}")

# a coarse TI x pTD uncertainty sweep
grid = SweepGrid(kind="mprage", n1=5, n2=4, ti_ms=(400.0, 2000.0),
                 ptd_ms=(200.0, 2000.0))
res = sweep_contour(weights, [mpm], grid, k_samples=12, cal_map=cal_map,
                    base_seed=3)
svgplot.contour(res.log10_iqr, res.axis1, res.axis2,
                os.path.join(HERE, "sweep_demo.svg"),
                xlabel="TI (ms)", ylabel="pTD (ms)",
                title="log10 calibrated IQR width (ml)")
print("wrote", os.path.join(HERE, "sweep_demo.svg"))
