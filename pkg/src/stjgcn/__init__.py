"""Spatio-temporal joint graph convolutional traffic forecaster built on a small numpy autodiff core."""
from .autograd import Tensor, backward, no_grad, precision, strict
from .data import TrafficDataset, generate_synthetic, load_distances, load_traffic
from .graphs import DistanceGraph, build_predefined
from .model import STJGCN, ModelConfig, count_parameters, plan_dilations
from .training import TrainConfig, evaluate, split_windows, train

__version__ = "0.1.0"
