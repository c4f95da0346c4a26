"""Binarized traffic-sign classifiers: training, accounting and packed inference."""

from .arch import ArchError, ArchSpec, count_params, infer_shapes, model_size, parse_arch, preset
from .network import Model, build_model
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
