"""Batch-wise training with the half-real / half-binary triple update.

Per batch: (1) update both networks on ``L(H_I, H_T)``; (2) update the image
network on ``L(H_I, sign(H_T))``; (3) update the text network on
``L(sign(H_I), H_T)``. The coherence target is computed once from raw
features before training starts.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import IO, List, Optional, Tuple

import numpy as np

from dgcpn import net as hnet
from dgcpn.dataset import PairedDataset
from dgcpn.loss import LossBreakdown, LossParams, total_loss_and_grads
from dgcpn.net import HashNet, SgdConfig
from dgcpn.retrieval import evaluate, pack
from dgcpn.simgraph import GcModel, GcParams, compute_gc_cached

log = logging.getLogger(__name__)

HASH_STRATEGIES = ("triple", "none", "value_gap")
FORWARD_MODES = ("recompute", "reuse")
LOG_COLUMNS = ("epoch", "l_c", "l_g", "l_i", "total", "map_i2t", "map_t2i")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """Training diverged; ``img_net``/``txt_net`` hold the last good (best-epoch) parameters."""

    def __init__(self, msg, img_net=None, txt_net=None, report=None):
        super().__init__(msg)
        self.img_net = img_net
        self.txt_net = txt_net
        self.report = report


@dataclass
class TrainConfig:
    """Everything one training run depends on.

    ``hash_strategy``: ``"triple"`` is the full half-real/half-binary update,
    ``"none"`` keeps only the real-valued step, ``"value_gap"`` keeps the
    real-valued step and adds ``||H - sign(H)||_F`` for both modalities.
    """

    gc: GcParams = field(default_factory=GcParams)
    loss: LossParams = field(default_factory=LossParams)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    patience: int = 10
    d_bits: int = 64
    hidden: int = 4096
    hidden_act: str = "relu"
    output_scale: float = 1.0
    hash_strategy: str = "triple"
    forward_mode: str = "recompute"
    value_gap_weight: float = 1.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.d_bits < 1 or self.hidden < 1:
            raise ValueError("d_bits and hidden must be >= 1")
        if self.hash_strategy not in HASH_STRATEGIES:
            raise ValueError(f"hash_strategy must be one of {HASH_STRATEGIES}")
        if self.forward_mode not in FORWARD_MODES:
            raise ValueError(f"forward_mode must be one of {FORWARD_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    l_c: float
    l_g: float
    l_i: float
    total: float
    map_i2t: float
    map_t2i: float

    @property
    def map_mean(self) -> float:
        return 0.5 * (self.map_i2t + self.map_t2i)

    def log_line(self) -> str:
        vals = [repr(getattr(self, c)) for c in LOG_COLUMNS[1:]]
        return "\t".join([str(self.epoch)] + vals)


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_map: float = float("nan")
    stop_reason: str = ""


def sign_quantize(h) -> np.ndarray:
    """Elementwise sign into {-1, +1}; zero maps to +1."""
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite entry in relaxed codes")
    return np.where(h < 0, -1.0, 1.0)


def precompute_gc(train: PairedDataset, gc: GcParams, cache_dir=None) -> GcModel:
    return compute_gc_cached(train, gc, cache_dir)


def encode(net: HashNet, feats, batch: int = 4096) -> np.ndarray:
    """Sign codes of ``feats`` under ``net``, as a float +-1 matrix."""
    feats = np.asarray(feats)
    out = np.empty((feats.shape[0], net.d_bits))
    for start in range(0, feats.shape[0], batch):
        h, _ = hnet.forward(net, feats[start:start + batch])
        out[start:start + batch] = sign_quantize(h)
    return out


def validation_map(img_net: HashNet, txt_net: HashNet, queries: PairedDataset,
                   retrieval: PairedDataset) -> Tuple[float, float]:
    q_img = pack(encode(img_net, queries.img_feats))
    q_txt = pack(encode(txt_net, queries.txt_feats))
    r_img = pack(encode(img_net, retrieval.img_feats))
    r_txt = pack(encode(txt_net, retrieval.txt_feats))
    i2t = evaluate(q_img, queries.labels, r_txt, retrieval.labels, task="I2T").map
    t2i = evaluate(q_txt, queries.labels, r_img, retrieval.labels, task="T2I").map
    return i2t, t2i


def batches(m: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of fewer than 2 items is dropped."""
    perm = rng.permutation(m)
    out = [perm[i:i + size] for i in range(0, m, size)]
    if out and out[-1].size < 2:
        out.pop()
    return out


def _value_gap(h: np.ndarray, weight: float, eps: float) -> Tuple[float, np.ndarray]:
    d = h - sign_quantize(h)
    v = math.sqrt(float(np.sum(d * d)) + eps)
    return weight * v, weight * d / v


def _step(net: HashNet, cache, grad_h, sgd: SgdConfig) -> None:
    hnet.apply_grads(net, hnet.backward(net, cache, grad_h), sgd)


def _check(lb: LossBreakdown, where: str) -> None:
    if not (math.isfinite(lb.total) and np.all(np.isfinite(lb.grad_hi)) and np.all(np.isfinite(lb.grad_ht))):
        raise FloatingPointError(f"non-finite loss or gradient in {where}")


def train_batch(img_net: HashNet, txt_net: HashNet, f_img, f_txt, S, cfg: TrainConfig) -> LossBreakdown:
    """One batch of updates; returns the real-valued step's loss breakdown."""
    h_i, c_i = hnet.forward(img_net, f_img)
    h_t, c_t = hnet.forward(txt_net, f_txt)
    lb = total_loss_and_grads(h_i, h_t, S, cfg.loss, "both")
    _check(lb, "real-valued step")
    g_i, g_t = lb.grad_hi, lb.grad_ht
    if cfg.hash_strategy == "value_gap":
        vi, gvi = _value_gap(h_i, cfg.value_gap_weight, cfg.loss.eps)
        vt, gvt = _value_gap(h_t, cfg.value_gap_weight, cfg.loss.eps)
        lb.terms["q:img"], lb.terms["q:txt"] = vi, vt
        g_i, g_t = g_i + gvi, g_t + gvt
    _step(img_net, c_i, g_i, cfg.sgd)
    _step(txt_net, c_t, g_t, cfg.sgd)
    if cfg.hash_strategy != "triple":
        return lb

    if cfg.forward_mode == "recompute":
        h_i, c_i = hnet.forward(img_net, f_img)
        h_t, c_t = hnet.forward(txt_net, f_txt)
    # image side real, text side binary; the binary operand is a constant
    lb2 = total_loss_and_grads(h_i, sign_quantize(h_t), S, cfg.loss, "img_only")
    _check(lb2, "image half-binary step")
    _step(img_net, c_i, lb2.grad_hi, cfg.sgd)

    if cfg.forward_mode == "recompute":
        h_i, _ = hnet.forward(img_net, f_img)
        h_t, c_t = hnet.forward(txt_net, f_txt)
    lb3 = total_loss_and_grads(sign_quantize(h_i), h_t, S, cfg.loss, "txt_only")
    _check(lb3, "text half-binary step")
    _step(txt_net, c_t, lb3.grad_ht, cfg.sgd)
    return lb


def init_nets(train: PairedDataset, cfg: TrainConfig) -> Tuple[HashNet, HashNet]:
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    kw = dict(hidden_act=cfg.hidden_act, output_scale=cfg.output_scale)
    img = hnet.init_net(train.d_img, cfg.hidden, cfg.d_bits, int(seeds[0]), **kw)
    txt = hnet.init_net(train.d_txt, cfg.hidden, cfg.d_bits, int(seeds[1]), **kw)
    return img, txt


def train(train: PairedDataset, val_queries: Optional[PairedDataset],
          val_retrieval: Optional[PairedDataset], cfg: TrainConfig,
          gc_model: Optional[GcModel] = None, log_file: Optional[IO[str]] = None,
          nets: Optional[Tuple[HashNet, HashNet]] = None) -> Tuple[HashNet, HashNet, TrainReport]:
    """Train both hashing networks and return the best-validation-epoch parameters.

    Without validation sets no early stopping happens and the last epoch is
    returned. ``log_file`` receives one tab-separated line per epoch.
    """
    validate = val_queries is not None and val_retrieval is not None
    if validate and (val_queries.labels is None or val_retrieval.labels is None):
        raise ValueError("validation sets must carry labels")
    if train.m < 2:
        raise ValueError("need at least 2 training pairs")
    if gc_model is None:
        gc_model = precompute_gc(train, cfg.gc)
    if gc_model.m != train.m:
        raise ValueError("GC model size does not match the training set")
    S_all = gc_model.s_final

    img_net, txt_net = nets if nets is not None else init_nets(train, cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    f_img = train.img_feats.astype(np.float64)
    f_txt = train.txt_feats.astype(np.float64)

    report = TrainReport()
    best = (img_net.copy(), txt_net.copy())
    since_best = 0
    if log_file is not None:
        log_file.write("#" + "\t".join(LOG_COLUMNS) + "\n")

    for epoch in range(1, cfg.sgd.epochs + 1):
        sums = np.zeros(4)
        count = 0
        for idx in batches(train.m, cfg.sgd.batch, shuffle_rng):
            S = S_all[np.ix_(idx, idx)]
            try:
                lb = train_batch(img_net, txt_net, f_img[idx], f_txt[idx], S, cfg)
            except (FloatingPointError, hnet.NonFiniteError) as exc:
                report.stop_reason = f"non-finite loss at epoch {epoch}: {exc}"
                raise NonFiniteLossError(report.stop_reason, best[0], best[1], report) from exc
            sums += (lb.l_c, lb.l_g, lb.l_i, lb.total)
            count += 1
        if count == 0:
            raise TrainingError("no batch with at least 2 items")
        means = sums / count
        if validate:
            i2t, t2i = validation_map(img_net, txt_net, val_queries, val_retrieval)
        else:
            i2t = t2i = float("nan")
        stats = EpochStats(epoch, *(float(x) for x in means), i2t, t2i)
        report.epochs.append(stats)
        if log_file is not None:
            log_file.write(stats.log_line() + "\n")
            log_file.flush()
        log.info("epoch %d total=%.6f map_i2t=%.4f map_t2i=%.4f", epoch, stats.total, i2t, t2i)

        if not validate or epoch == 1 or stats.map_mean > report.best_map:
            report.best_epoch, report.best_map = epoch, stats.map_mean
            best = (img_net.copy(), txt_net.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stop_reason = f"no validation improvement for {cfg.patience} epochs"
                break
    if not report.stop_reason:
        report.stop_reason = f"reached max epochs ({cfg.sgd.epochs})"
    return best[0], best[1], report


def write_metrics_log(report: TrainReport, path: os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("#" + "\t".join(LOG_COLUMNS) + "\n")
        for e in report.epochs:
            fh.write(e.log_line() + "\n")
