"""Microcalcification group detection with scope-based normalization.

A cascade of randomized-tree classifiers over hierarchical, locally
normalized features: individual candidates, their neighborhoods, and
agglomerated group hypotheses.  Works on 2D images and slice-wise on volumes.
"""
from .image_core import Image2D, Volume3D, load_any, load_image, load_volume
from .candidates import Candidate, ObjectnessParams
from .features import FeatureParams
from .classifier import CascadeModel, load_model, save_model
from .params import PipelineParams, TrainConfig
from .cascade import prepare_case, run_cascade, train_cascade
from .phantom import PhantomSpec, synth_phantom
from .evaluation import compute_froc, match_detections, transfer_experiment

__version__ = "0.1.0"
