"""Sparse convolutional feature hierarchies.

Predictive sparse decomposition (plain and discriminative), the tanh and
shrinkage/inhibition encoders, local contrast normalization, average, max and
pyramid pooling, supervised and sparse-state training of two-stage networks,
and input-space inversion of recorded feature maps.
"""

from .classifier import L1L2LogisticRegression
from .data import CifarPreprocessor, Dataset, load_cifar10, synthetic_cifar
from .dpsd import DPSD, ConvDPSD
from .encoder import SiEncoder, TanhEncoder
from .exceptions import (
    ConfigError,
    DimensionError,
    FormatError,
    LabelError,
    NumericError,
    ParameterError,
    SparseFeatError,
    TrainingError,
)
from .invert import InversionTask, hallucinate, normalized_mse
from .network import Network, SparseConvNet, get_arch, load_model, parse_protocol, save_model
from .norm import NormConfig, local_cn
from .pooling import PoolSpec, PyramidSpec
from .solver import SmoothTerm, fista_solve, ista_solve
from .tensor import ConnectionTable, KernelBank

__version__ = "0.1.0"

__all__ = [
    "CifarPreprocessor",
    "ConfigError",
    "ConnectionTable",
    "ConvDPSD",
    "DPSD",
    "Dataset",
    "DimensionError",
    "FormatError",
    "InversionTask",
    "KernelBank",
    "L1L2LogisticRegression",
    "LabelError",
    "Network",
    "NormConfig",
    "NumericError",
    "ParameterError",
    "PoolSpec",
    "PyramidSpec",
    "SiEncoder",
    "SmoothTerm",
    "SparseConvNet",
    "SparseFeatError",
    "TanhEncoder",
    "TrainingError",
    "fista_solve",
    "get_arch",
    "hallucinate",
    "ista_solve",
    "load_cifar10",
    "load_model",
    "local_cn",
    "normalized_mse",
    "parse_protocol",
    "save_model",
    "synthetic_cifar",
]
