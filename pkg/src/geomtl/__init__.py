"""Multi-territory two-tower recommender with per-group MTL heads."""

from .kernels import backend
from .metrics import pr_auc, relative_gain, score_histogram
from .numcore import Adam, BatchNormLayer, DenseLayer, adam_step, bce_loss, grad_check
from .towers import Batch, BaselineModel, MtlModel, TowerConfig, checkpoint_load, checkpoint_save
from .trainer import TrainConfig, train
from .worldgen import DataConfig, World, build_world

__version__ = "0.1.0"
