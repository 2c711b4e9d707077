"""physseg: acquisition-invariant MR segmentation toolkit.

Simulates MR contrasts from quantitative tissue maps with static sequence
equations, trains a physics-conditioned voxelwise segmenter with a batch
stratification loss and explicit uncertainty, calibrates volumetric error
bounds, and harmonizes multi-site volumetry.
"""

__version__ = "0.1.0"

from .volumes import (Grid3, HardSegmentation, MpmVolume, SoftSegmentation,
                      TISSUES, VolumeError, extract_patch, read_mvol, write_mvol)
from .simulate import (AugmentConfig, Mprage, ParamRange, Spgr,
                       SimulateError, apply_bias_field, apply_noise,
                       make_batch, sample_params, signal_mprage,
                       signal_mprage_ir, signal_spgr, simulate_volume)
from .phantom import (CohortSpec, SiteSpec, TissueParams, generate_cohort,
                      generate_phantom, multisite_presets)
from .pgs import TissueGmm, fit_gmm, label_pgs
from .model import (MlpConfig, ModelWeights, TrainConfig, featurize, forward,
                    load_checkpoint, predict, save_checkpoint, train)
from .uncertainty import (CalibrationMap, PercentileVolumeCurve, SweepGrid,
                          calibrate, ernst_angle, iqr_bounds,
                          percentile_volumes, sweep_contour)
from .harmonize import (CombatModel, FeatureTable, age_regression_rmse,
                        apply_combat, cov, dice, fit_combat, fit_site_trends,
                        levene_test, partition_age_groups, trend_dispersion,
                        wilcoxon_signed_rank)
from .analysis import run_annealing_study, run_harmonization_study
