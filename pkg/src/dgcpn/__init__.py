"""Graph-neighbor coherence preserving cross-modal hashing.

Unsupervised image/text hashing: a k-NN graph over coexistent feature pairs
yields a training similarity, two small networks learn relaxed codes under
three similarity-preserving losses, and retrieval runs over bit-packed
Hamming codes.
"""

from dgcpn.dataset import PairedDataset, SplitSpec, gen_synthetic, load_dataset, make_split, save_dataset
from dgcpn.loss import LossBreakdown, LossParams, total_loss_and_grads
from dgcpn.net import HashNet, SgdConfig, apply_grads, forward, init_net
from dgcpn.retrieval import EvalReport, PackedCodes, evaluate, hamming, pack, unpack
from dgcpn.simgraph import GcModel, GcParams, compute_gc
from dgcpn.trainer import TrainConfig, TrainReport, precompute_gc, sign_quantize, train

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "GcModel",
    "GcParams",
    "HashNet",
    "LossBreakdown",
    "LossParams",
    "PackedCodes",
    "PairedDataset",
    "SgdConfig",
    "SplitSpec",
    "TrainConfig",
    "TrainReport",
    "apply_grads",
    "compute_gc",
    "evaluate",
    "forward",
    "gen_synthetic",
    "hamming",
    "init_net",
    "load_dataset",
    "make_split",
    "pack",
    "precompute_gc",
    "save_dataset",
    "sign_quantize",
    "total_loss_and_grads",
    "train",
    "unpack",
]
