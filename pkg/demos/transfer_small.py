"""Reduced transfer experiment: train on 2D phantoms, test on shifted 3D volumes.

Compares scope-based and whole-image normalization on the same cases.  The
full-size run (200 train / 40 test) is what tests/test_acceptance.py uses;
this one finishes in a few minutes.

    python3 demos/transfer_small.py [seed]
"""
import sys
from dataclasses import replace

from mccad.evaluation import ExperimentConfig, sensitivity_at, transfer_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ExperimentConfig(n_train=60, n_test=10, test_nz=6)
cfg = replace(cfg, training=replace(cfg.training, forest=replace(cfg.training.forest, n_trees=40)))
r = transfer_experiment(cfg, seed=seed)

print(f"train {r['timing_s']['train']:.0f}s, test {r['timing_s']['test']:.0f}s")
for name, curve in r["curves"].items():
    print(f"\n{name} normalization")
    for fp in (0.1, 0.25, 0.5, 1.0, 2.0, 4.0):
        print(f"  <= {fp:4.2f} FP/volume  sens {sensitivity_at(curve, fp):.3f}")
