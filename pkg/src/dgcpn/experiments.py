"""Seeded desk-scale experiments: the synthetic benchmark, ablation variants
and the similarity-quality comparison."""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from dgcpn.dataset import PairedDataset, gen_synthetic, make_split
from dgcpn.loss import LossParams
from dgcpn.net import SgdConfig
from dgcpn.retrieval import evaluate_ranking, relevance_matrix
from dgcpn.simgraph import GcParams, compute_gc, cosine_matrix
from dgcpn.trainer import TrainConfig, init_nets, precompute_gc, train, validation_map

ABLATIONS = ("full", "olpd", "nopd", "gl", "gl+cl", "nhash", "hashl")
DEFAULT_CUTOFFS = (500, 1000, 2000, 3000, 4000, 5000)


def ablation(cfg: TrainConfig, variant: str) -> TrainConfig:
    """The ablation ``variant`` of ``cfg``.

    olpd: pairwise similarity only (gamma = 0); nopd: coherence only
    (gamma = 1); gl: coherence loss only; gl+cl: no consistency loss;
    nhash: real-valued step only; hashl: real-valued step plus a value-gap
    penalty.
    """
    v = variant.lower()
    if v == "full":
        return cfg
    if v == "olpd":
        return dataclasses.replace(cfg, gc=dataclasses.replace(cfg.gc, gamma=0.0))
    if v == "nopd":
        return dataclasses.replace(cfg, gc=dataclasses.replace(cfg.gc, gamma=1.0))
    if v == "gl":
        return dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, lambda2=0.0, coexist_weight=0.0))
    if v == "gl+cl":
        return dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, lambda2=0.0))
    if v == "nhash":
        return dataclasses.replace(cfg, hash_strategy="none")
    if v == "hashl":
        return dataclasses.replace(cfg, hash_strategy="value_gap")
    raise ValueError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")


@dataclass
class BenchmarkSpec:
    """Synthetic benchmark: 5 clusters, 1000 train/retrieval, 200 val and 200 test queries."""

    n_clusters: int = 5
    per_cluster: int = 280
    d_img: int = 32
    d_txt: int = 32
    noise: float = 0.6
    label_noise: float = 0.0
    n_test: int = 200
    n_val: int = 200
    data_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        gc=GcParams(alpha=0.5, gamma=0.3, beta=100.0, k=100),
        loss=LossParams(reduction="mean"),
        sgd=SgdConfig(lr=0.005, momentum=0.9, weight_decay=0.0005, batch=32, epochs=50),
        d_bits=16,
        hidden=64,
        patience=10,
    ))


@dataclass
class BenchmarkResult:
    untrained_i2t: float
    untrained_t2i: float
    test_i2t: float
    test_t2i: float
    report: object
    metrics_log: str

    @property
    def test_mean(self) -> float:
        return 0.5 * (self.test_i2t + self.test_t2i)


def benchmark_data(spec: BenchmarkSpec):
    ds = gen_synthetic(spec.n_clusters, spec.per_cluster, spec.d_img, spec.d_txt,
                       noise=spec.noise, label_noise=spec.label_noise, seed=spec.data_seed)
    split = make_split(ds, test=spec.n_test, validation=spec.n_val, train=1.0, seed=spec.data_seed)
    return (ds.subset(split.train_idx), ds.subset(split.validation_query_idx),
            ds.subset(split.test_query_idx), ds.subset(split.retrieval_idx))


def run_benchmark(spec: Optional[BenchmarkSpec] = None, cfg: Optional[TrainConfig] = None) -> BenchmarkResult:
    spec = spec or BenchmarkSpec()
    cfg = cfg or spec.train
    tr, val, test, retrieval = benchmark_data(spec)
    u_i2t, u_t2i = validation_map(*init_nets(tr, cfg), test, retrieval)
    buf = io.StringIO()
    img, txt, report = train(tr, val, retrieval, cfg, gc_model=precompute_gc(tr, cfg.gc), log_file=buf)
    i2t, t2i = validation_map(img, txt, test, retrieval)
    return BenchmarkResult(u_i2t, u_t2i, i2t, t2i, report, buf.getvalue())


def similarity_variants(ds: PairedDataset, gc: GcParams) -> Dict[str, np.ndarray]:
    """Item-item similarity of each variant: image cosine, text cosine, fused, GC."""
    model = compute_gc(ds, gc)
    return {
        "image": cosine_matrix(ds.img_feats),
        "text": cosine_matrix(ds.txt_feats),
        "fused": model.dist,
        "gc": model.s_final,
    }


def rank_by_similarity(sim: np.ndarray) -> np.ndarray:
    """Per-row ranking of all other items by descending similarity, ties by index."""
    sim = np.array(sim, dtype=np.float64)
    m = sim.shape[0]
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    # self sits last (-inf); drop it
    return order[:, : m - 1]


def compare_similarities(ds: PairedDataset, gc: GcParams,
                         cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> Dict[str, Dict[int, float]]:
    """MAP@N of ranking every item's neighbors by each similarity variant.

    Every item queries all other items; relevance is label overlap. Cutoffs
    past ``m - 1`` are clipped to ``m - 1``.
    """
    if ds.labels is None:
        raise ValueError("comparing similarities needs labels")
    relevant = relevance_matrix(ds.labels, ds.labels)
    table = {}
    for name, sim in similarity_variants(ds, gc).items():
        order = rank_by_similarity(sim)
        rel_rows = relevant[np.arange(ds.m)[:, None], order]
        eff = sorted(set(min(int(c), ds.m - 1) for c in cutoffs))
        rep = evaluate_ranking(np.tile(np.arange(ds.m - 1), (ds.m, 1)), rel_rows, eff, task=name)
        table[name] = {int(c): rep.map_at[min(int(c), ds.m - 1)] for c in cutoffs}
    return table


def format_table(table: Dict[str, Dict[int, float]]) -> str:
    cutoffs = sorted(next(iter(table.values())).keys())
    lines = ["variant\t" + "\t".join(f"map@{c}" for c in cutoffs)]
    for name, row in table.items():
        lines.append(name + "\t" + "\t".join(f"{row[c]:.6f}" for c in cutoffs))
    return "\n".join(lines) + "\n"
