"""Mini-batch GCN training with degree-prioritized seeds and loss-plateau fanout growth."""

from .controller import EarlyStopper, FanoutController
from .graph import CsrGraph, DatasetBundle, build_csr, load_dataset, node_scores, save_dataset
from .sampler import Block, build_blocks, sample_block
from .trainer import RunReport, TrainConfig, Trainer, compare, run, sensitivity_sweep

__version__ = "0.1.0"
