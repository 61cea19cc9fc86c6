"""Turbulence-like stochastic fields from a U-net trained on multiscale statistics.

The network maps Gaussian white noise to velocity increments whose
cumulative sum reproduces prescribed reference curves of the second-order
structure function, skewness and flatness across scales.
"""
from .errors import TurbStochError
from .fieldgen import FieldEnsemble, generate_ensemble, generate_field, read_fields, write_fields
from .mstats import ScaleSet, StatCurve, ensemble_curves, kl_to_standard_gaussian, structure_function
from .refcurves import ReferenceCurves, ReferenceModelParams, make_test_field, synth_reference
from .trainer import TrainConfig, compute_loss, train
from .unet import ModelSpec, UNetModel, build_model, default_spec, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
