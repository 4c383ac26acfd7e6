"""Gather-excite operators for convolutional networks, on a small numpy autograd core."""

from .analysis import (PruneCurve, SelectivityHistogram, class_selectivity, export_csv, gate_importances,
                       prune_curve, prune_eval, selectivity_index)
from .config import RunConfig, load_config, parse_arch
from .cost import CostReport, count, registry_census
from .data import Dataset, augment, load_cifar, make_synthetic_cifar
from .exceptions import (CheckpointError, ConfigurationError, DimensionError, FormatError, GEError,
                         NumericalError, StateError, UsageError)
from .ge import (GLOBAL, ExciteKind, ExtentSpec, GatherKind, GEUnit, GEUnitConfig, excite_direct,
                 excite_subnet, gather_depthwise, gather_pool, ge_unit_forward, selection_window)
from .models import ArchSpec, GEPlacement, Model, build_model
from .optim import SGD, sgd_step
from .tensor import Parameter, Tape, Tensor, backward, no_grad
from .training import (CheckpointRecord, FixedStep, Plateau, TrainConfig, evaluate, load_checkpoint,
                       save_checkpoint, train)

__version__ = "0.1.0"
