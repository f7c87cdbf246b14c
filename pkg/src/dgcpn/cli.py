"""Command-line entry point: ``dgcpn <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from dgcpn import dataset as dsmod
from dgcpn import net as hnet
from dgcpn.experiments import compare_similarities, format_table
from dgcpn.loss import LossParams
from dgcpn.net import SgdConfig
from dgcpn.retrieval import atomic_write, evaluate, hamming_matrix, load_codes, pack, save_codes, write_reports
from dgcpn.simgraph import GcParams, compute_gc_cached, save_gc
from dgcpn.trainer import TrainConfig, encode, precompute_gc, train

log = logging.getLogger("dgcpn")

CACHE_ENV = "DGCPN_CACHE_DIR"
GC_MODES = ("full", "pairwise-only", "no-pairwise")
LOSS_SETS = ("all", "gl", "gl+cl")
HASH_STRATEGIES = ("triple", "none", "value-gap")
SUBSETS = ("all", "retrieval", "train", "validation", "test")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every tunable of a run. Defaults are the desk-scale synthetic setting;
    ``--preset`` loads the published per-dataset values instead."""

    alpha: float = 0.5
    gamma: float = 0.3
    beta: float = 100.0
    k: int = 100
    auto_beta: bool = False
    include_self: bool = True
    gc_mode: str = "full"
    lambda1: float = 1.0
    lambda2: float = 1.0
    coexist_target: float = 1.5
    coexist_form: str = "l2"
    squared: bool = False
    reduction: str = "mean"
    losses: str = "all"
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 32
    epochs: int = 50
    patience: int = 10
    d_bits: int = 16
    hidden: int = 64
    hidden_act: str = "relu"
    output_scale: float = 1.0
    hash_strategy: str = "triple"
    forward_mode: str = "recompute"
    seed: int = 0

    def __post_init__(self):
        if self.gc_mode not in GC_MODES:
            raise UsageError(f"gc_mode must be one of {GC_MODES}")
        if self.losses not in LOSS_SETS:
            raise UsageError(f"losses must be one of {LOSS_SETS}")
        if self.hash_strategy not in HASH_STRATEGIES:
            raise UsageError(f"hash_strategy must be one of {HASH_STRATEGIES}")

    def gc_params(self) -> GcParams:
        gamma = {"full": self.gamma, "pairwise-only": 0.0, "no-pairwise": 1.0}[self.gc_mode]
        return GcParams(alpha=self.alpha, gamma=gamma, beta=self.beta, k=self.k,
                        include_self=self.include_self, auto_beta=self.auto_beta)

    def train_config(self) -> TrainConfig:
        lambda2 = 0.0 if self.losses in ("gl", "gl+cl") else self.lambda2
        coexist_weight = 0.0 if self.losses == "gl" else 1.0
        loss = LossParams(lambda1=self.lambda1, lambda2=lambda2, coexist_target=self.coexist_target,
                          coexist_form=self.coexist_form, squared=self.squared,
                          coexist_weight=coexist_weight, reduction=self.reduction)
        sgd = SgdConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                        batch=self.batch, epochs=self.epochs)
        return TrainConfig(gc=self.gc_params(), loss=loss, sgd=sgd, seed=self.seed,
                           patience=self.patience, d_bits=self.d_bits, hidden=self.hidden,
                           hidden_act=self.hidden_act, output_scale=self.output_scale,
                           hash_strategy=self.hash_strategy.replace("-", "_"),
                           forward_mode=self.forward_mode)


PRESETS = {
    "desk": {},
    "paper-wikipedia": dict(alpha=0.3, gamma=0.3, lambda1=1.0, lambda2=1.0, beta=900.0, k=600,
                            hidden=4096, d_bits=64, reduction="sum", epochs=100),
    "paper-mirflickr": dict(alpha=0.01, gamma=0.3, lambda1=1.0, lambda2=1.0, beta=4000.0, k=2000,
                            hidden=4096, d_bits=64, reduction="sum", epochs=100),
    "paper-nuswide": dict(alpha=0.1, gamma=0.3, lambda1=1.0, lambda2=1.0, beta=4500.0, k=2000,
                          hidden=4096, d_bits=64, reduction="sum", epochs=100),
}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add_run_flags(p: argparse.ArgumentParser, groups=("gc", "loss", "sgd", "net")) -> None:
    """Run-config flags; all default to None so unset flags don't override the config file."""
    p.add_argument("--config", help="JSON file of run-config values (flags take precedence)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base values before --config and flags")
    if "gc" in groups:
        g = p.add_argument_group("graph-neighbor coherence")
        g.add_argument("--alpha", type=float)
        g.add_argument("--gamma", type=float)
        g.add_argument("--beta", type=float)
        g.add_argument("--k", type=int)
        g.add_argument("--auto-beta", type=_bool, metavar="BOOL")
        g.add_argument("--include-self", type=_bool, metavar="BOOL")
        g.add_argument("--gc-mode", choices=GC_MODES)
    if "loss" in groups:
        g = p.add_argument_group("losses")
        g.add_argument("--lambda1", type=float)
        g.add_argument("--lambda2", type=float)
        g.add_argument("--coexist-target", type=float)
        g.add_argument("--coexist-form", choices=("l2", "trace"))
        g.add_argument("--squared", type=_bool, metavar="BOOL")
        g.add_argument("--reduction", choices=("sum", "mean"))
        g.add_argument("--losses", choices=LOSS_SETS)
    if "sgd" in groups:
        g = p.add_argument_group("optimizer")
        g.add_argument("--lr", type=float)
        g.add_argument("--momentum", type=float)
        g.add_argument("--weight-decay", type=float)
        g.add_argument("--batch", type=int)
        g.add_argument("--epochs", type=int)
        g.add_argument("--patience", type=int)
        g.add_argument("--hash-strategy", choices=HASH_STRATEGIES)
        g.add_argument("--forward-mode", choices=("recompute", "reuse"))
        g.add_argument("--seed", type=int)
    if "net" in groups:
        g = p.add_argument_group("network")
        g.add_argument("--d-bits", type=int)
        g.add_argument("--hidden", type=int)
        g.add_argument("--hidden-act", choices=("relu", "tanh"))
        g.add_argument("--output-scale", type=float)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then preset, then config file, then explicit flags."""
    names = {f.name for f in fields(RunConfig)}
    values = dict(PRESETS[getattr(args, "preset", None) or "desk"])
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}") from exc
        unknown = set(doc) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(**values)
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Optional[Path] = None) -> None:
    text = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    print(f"config: {text}", file=sys.stderr)
    if out_dir is not None:
        atomic_write(out_dir / "run_config.json",
                      (json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n").encode())


def _load_split(path: Optional[str]) -> Optional[dsmod.SplitSpec]:
    if not path:
        return None
    return dsmod.SplitSpec.from_dict(json.loads(Path(path).read_text()))


def _subset(ds: dsmod.PairedDataset, split: Optional[dsmod.SplitSpec], which: str) -> dsmod.PairedDataset:
    if which == "all":
        return ds
    if split is None:
        raise UsageError(f"--subset {which} needs --split")
    idx = {"retrieval": split.retrieval_idx, "train": split.train_idx,
           "validation": split.validation_query_idx, "test": split.test_query_idx}[which]
    if idx.size == 0:
        raise UsageError(f"the {which} subset is empty")
    return ds.subset(idx)


# -- commands ----------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    ds = dsmod.gen_synthetic(args.clusters, args.per_cluster, args.d_img, args.d_txt,
                             noise=args.noise, label_noise=args.label_noise, seed=args.seed)
    dsmod.save_dataset(ds, args.output)
    print(f"wrote {ds.m} pairs to {args.output}", file=sys.stderr)
    return 0


def cmd_split(args) -> int:
    ds = dsmod.load_dataset(args.dataset)
    split = dsmod.make_split(ds, test=_frac_or_count(args.test), validation=_frac_or_count(args.validation),
                             train=_frac_or_count(args.train), seed=args.seed)
    atomic_write(Path(args.output), (json.dumps(split.to_dict()) + "\n").encode())
    return 0


def _frac_or_count(s: str):
    return float(s) if any(c in s for c in ".eE") else int(s)


def cmd_compute_gc(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    ds = _subset(dsmod.load_dataset(args.dataset), _load_split(args.split), args.subset)
    model = compute_gc_cached(ds, cfg.gc_params(), os.environ.get(CACHE_ENV) or None)
    save_gc(model, args.output)
    print(f"m={model.m} beta={model.beta!r} s_final in [{model.s_final.min():.6f}, "
          f"{model.s_final.max():.6f}]", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    tcfg = cfg.train_config()
    ds = dsmod.load_dataset(args.dataset)
    split = _load_split(args.split)
    if split is None:
        tr, vq, vr = ds, None, None
    else:
        tr = ds.subset(split.train_idx)
        vq = ds.subset(split.validation_query_idx) if split.validation_query_idx.size else None
        vr = ds.subset(split.retrieval_idx) if vq is not None else None
    if vq is not None and (vq.labels is None or vr.labels is None):
        raise UsageError("validation needs a labeled dataset")
    gc_model = precompute_gc(tr, tcfg.gc, os.environ.get(CACHE_ENV) or None)
    with open(out / "metrics.tsv", "w") as logf:
        img, txt, report = train(tr, vq, vr, tcfg, gc_model=gc_model, log_file=logf)
    hnet.save_checkpoint(img, out / "img.ckpt")
    hnet.save_checkpoint(txt, out / "txt.ckpt")
    print(f"best epoch {report.best_epoch} (mean val MAP {report.best_map:.4f}); {report.stop_reason}",
          file=sys.stderr)
    return 0


def cmd_encode(args) -> int:
    ds = _subset(dsmod.load_dataset(args.dataset), _load_split(args.split), args.subset)
    feats = ds.img_feats if args.modality == "image" else ds.txt_feats
    try:
        net = hnet.load_checkpoint(args.checkpoint, d_in=feats.shape[1])
    except ValueError as exc:
        raise ValueError(f"{exc} ({args.modality} features)") from exc
    net.hidden_act = args.hidden_act
    net.output_scale = args.output_scale
    codes = pack(encode(net, feats))
    save_codes(codes, args.output)
    return 0


def cmd_retrieve(args) -> int:
    q = load_codes(args.query)
    r = load_codes(args.retrieval)
    dist = hamming_matrix(q, r)
    top = min(args.top, r.n)
    lines = ["query\trank\titem\thamming"]
    for i in range(q.n):
        order = np.argsort(dist[i], kind="stable")[:top]
        lines += [f"{i}\t{k + 1}\t{j}\t{dist[i, j]}" for k, j in enumerate(order)]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    ds = dsmod.load_dataset(args.labels)
    if ds.labels is None:
        raise UsageError(f"{args.labels} carries no labels")
    split = _load_split(args.split)
    q_labels = _subset(ds, split, args.query_subset).labels
    r_labels = _subset(ds, split, args.retrieval_subset).labels
    tasks = [("I2T", args.i2t), ("T2I", args.t2i)]
    if not any(paths for _, paths in tasks):
        raise UsageError("give --i2t and/or --t2i")
    reports = []
    for task, paths in tasks:
        if not paths:
            continue
        q, r = load_codes(paths[0]), load_codes(paths[1])
        reports.append(evaluate(q, q_labels, r, r_labels, cutoffs=args.cutoffs or (), task=task))
    write_reports(reports, f"{args.out}.tsv", f"{args.out}.json")
    for rep in reports:
        sys.stdout.write(rep.to_tsv())
    return 0


def cmd_compare_similarities(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    ds = _subset(dsmod.load_dataset(args.dataset), _load_split(args.split), args.subset)
    table = compare_similarities(ds, cfg.gc_params(), cutoffs=args.cutoffs)
    text = format_table(table)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgcpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a seeded clustered CMF dataset")
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--per-cluster", type=int, default=280)
    p.add_argument("--d-img", type=int, default=32)
    p.add_argument("--d-txt", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.6)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("split", help="seeded retrieval/train/validation/test split")
    p.add_argument("dataset")
    p.add_argument("--test", default="0", help="fraction (with a dot) or count")
    p.add_argument("--validation", default="0", help="fraction (with a dot) or count")
    p.add_argument("--train", default="1.0", help="fraction of the retrieval set, or count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("compute-gc", help="compute the coherence model of a dataset")
    p.add_argument("dataset")
    p.add_argument("--split")
    p.add_argument("--subset", choices=SUBSETS, default="all")
    p.add_argument("-o", "--output", required=True)
    _add_run_flags(p, groups=("gc",))
    p.set_defaults(func=cmd_compute_gc)

    p = sub.add_parser("train", help="train both hashing networks")
    p.add_argument("dataset")
    p.add_argument("--split", help="split JSON; without it all pairs train and nothing validates")
    p.add_argument("--out-dir", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="binary codes for one modality")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modality", choices=("image", "text"), required=True)
    p.add_argument("--split")
    p.add_argument("--subset", choices=SUBSETS, default="all")
    p.add_argument("--hidden-act", choices=("relu", "tanh"), default="relu")
    p.add_argument("--output-scale", type=float, default=1.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="Hamming-ranked top items per query")
    p.add_argument("--query", required=True)
    p.add_argument("--retrieval", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="MAP / MAP@N of code files")
    p.add_argument("--i2t", nargs=2, metavar=("QUERY_IMG_CODES", "RETRIEVAL_TXT_CODES"))
    p.add_argument("--t2i", nargs=2, metavar=("QUERY_TXT_CODES", "RETRIEVAL_IMG_CODES"))
    p.add_argument("--labels", required=True, help="CMF dataset holding the labels")
    p.add_argument("--split")
    p.add_argument("--query-subset", choices=SUBSETS, default="all")
    p.add_argument("--retrieval-subset", choices=SUBSETS, default="all")
    p.add_argument("--cutoffs", type=int, nargs="*")
    p.add_argument("--out", required=True, help="report path prefix (.tsv and .json are appended)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-similarities", help="MAP@N of image/text/fused/GC similarity rankings")
    p.add_argument("dataset")
    p.add_argument("--split")
    p.add_argument("--subset", choices=SUBSETS, default="all")
    p.add_argument("--cutoffs", type=int, nargs="+", default=[500, 1000, 2000, 3000, 4000, 5000])
    p.add_argument("-o", "--output")
    _add_run_flags(p, groups=("gc",))
    p.set_defaults(func=cmd_compare_similarities)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dgcpn {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"dgcpn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
