"""Continual robust training on a small numpy autodiff stack.

The pieces most scripts need are re-exported here; everything else lives in
its submodule (``crtlab.threats``, ``crtlab.trainer``, ``crtlab.oracle``, ...).
"""

from .data import Dataset, generate_shapes, load_idx
from .errors import CheckpointError, ConfigError, CrtError, DatasetError
from .experiment import ExperimentConfig, parse_config, run_schedule
from .metrics import CarCriteria, RunMetrics, check_car, robust_accuracy, union_accuracy
from .model import MlpModel, load_checkpoint, save_checkpoint
from .regularizers import RegularizerConfig
from .threats import ThreatModel, attack
from .trainer import KnowledgeSet, TrainConfig, finetune, run_timeline, train_initial

__version__ = "0.1.0"
