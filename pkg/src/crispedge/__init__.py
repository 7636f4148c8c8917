"""Crisp edge detection with a logical refinement network (2D and 3D)."""

from ._validation import ConfigError, PaddingRequiredError, ShapeError
from .data import Sample, SynthConfig, extract_edges, generate_synthetic, load_nuclei_dataset, split_dataset
from .estimator import CrispEdgeDetector
from .gate import check_subset, gate_combine, logical_gate, refine_gate
from .losses import LossConfig, bce_loss, focal_loss, hybrid_loss
from .metrics import EvalConfig, crispness_sweep, dice, hausdorff, match_edges, ods, ois
from .networks import NetConfig, build_edge_net, build_object_net, build_refine_net
from .training import TrainConfig, evaluate_run, predict, train_phase1, train_phase2

__version__ = "0.1.0"
