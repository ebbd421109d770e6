"""Command-line surface: reproducible experiments over the library.

Subcommands: gen-synthetic, dist, pairwise, train, retrieve, bench,
gradcheck. Every run logs its resolved configuration (defaults and seed
included) to stderr; outputs go to --out. Exit codes: 0 success, 1
validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .data import SynthConfig, gen_synthetic, load_manifest, load_seqf
from .encoder import (TrainConfig, encode_pairs, kind_from_dict, kind_to_dict,
                      load_checkpoint, save_checkpoint, train)
from .kernels import (EuclInterp, HardDTW, SoftDTW, Wasserstein, distance_value,
                      pairwise_matrix)
from .retrieval import (Agg, Hybrid, Seq, bench, format_report_table, retrieve_pairs,
                        write_report_tsv)
from .verification import run_gradcheck

logger = logging.getLogger("seqcontrast")

METRICS = ("eucl", "sdtw", "hdtw", "wass")


def _kind_from_args(args) -> object:
    d = {"metric": args.metric}
    if args.metric == "eucl":
        d["direction"] = getattr(args, "direction", None) or "v2a"
        d["stage"] = getattr(args, "stage", None) or "post"
    elif args.metric == "sdtw":
        d["gamma"] = args.gamma
    elif args.metric == "wass":
        d.update(epsilon=args.epsilon, iters=args.iters, pos_weight=args.pos_weight)
    return kind_from_dict(d)


def _add_kernel_flags(p: argparse.ArgumentParser, with_stage: bool = False) -> None:
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--direction", choices=("v2a", "a2v"), default=None)
    if with_stage:
        p.add_argument("--stage", choices=("pre", "post"), default=None)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--pos-weight", type=float, default=1.0)


def _log_config(command: str, resolved: dict) -> None:
    logger.info("resolved config %s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def cmd_gen_synthetic(args) -> int:
    cfg = SynthConfig(num_pairs=args.pairs, dim_v=args.dim_v, dim_a=args.dim_a,
                      latent_dim=args.latent_dim, len_v=args.len_v, len_a=args.len_a,
                      noise_std=args.noise_std, seed=args.seed,
                      distractor_correlation=args.distractor_corr)
    _log_config("gen-synthetic", {**cfg.__dict__, "out": str(args.out)})
    manifest = gen_synthetic(cfg, args.out)
    print(f"wrote {len(manifest)} pairs to {args.out}")
    return 0


def cmd_dist(args) -> int:
    kind = _kind_from_args(args)
    _log_config("dist", {"kind": kind_to_dict(kind), "a": args.a, "b": args.b})
    a = load_seqf(args.a)
    b = load_seqf(args.b)
    print(distance_value(a, b, kind))
    return 0


def cmd_pairwise(args) -> int:
    kind = _kind_from_args(args)
    _log_config("pairwise", {"kind": kind_to_dict(kind), "videos": args.videos,
                             "audios": args.audios, "workers": args.workers, "out": args.out})
    videos = [v for v, _ in load_manifest(args.videos).load_pairs()]
    audios = [a for _, a in load_manifest(args.audios).load_pairs()]
    matrix = pairwise_matrix(videos, audios, kind, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("id\t" + "\t".join(a.id for a in audios) + "\n")
        for v, row in zip(videos, matrix.values):
            fh.write(v.id + "\t" + "\t".join(f"{x:.9g}" for x in row) + "\n")
    print(f"wrote {matrix.rows}x{matrix.cols} matrix to {args.out}")
    return 0


def cmd_train(args) -> int:
    kind = _kind_from_args(args)
    cfg = TrainConfig(
        loss_kind=args.loss, distance=kind, batch_size=args.batch_size, steps=args.steps,
        base_lr=args.lr, warmup_steps=args.warmup, weight_decay=args.weight_decay,
        seed=args.seed, tau_init=args.tau_init, lambda_init=args.lambda_init,
        normalize_distances=not args.no_dist_norm, multitask_weight=args.multitask_weight,
        model_dim=args.model_dim, hidden_dim=args.hidden_dim,
    )
    _log_config("train", {**cfg.to_dict(), "manifest": args.manifest,
                          "val_manifest": args.val_manifest, "ckpt_out": args.ckpt_out})
    manifest = load_manifest(args.manifest)
    val = load_manifest(args.val_manifest) if args.val_manifest else None
    report = train(manifest, cfg, val_source=val)
    save_checkpoint(args.ckpt_out, report.params, cfg, report.temperatures)
    print(f"final loss {report.losses[-1]:.6f} after {cfg.steps} steps "
          f"({report.elapsed_s:.1f}s); checkpoint: {args.ckpt_out}")
    if report.eval_metrics:
        for k in sorted(report.eval_metrics):
            print(f"{k}\t{report.eval_metrics[k]:.4f}")
    return 0


def _mode_from_args(mode: str, k: int | None, kind) -> object:
    if mode == "agg":
        return Agg()
    if mode == "seq":
        return Seq(kind)
    if mode == "hybrid":
        if k is None:
            raise ValueError("--k is required for hybrid retrieval")
        return Hybrid(k=k, kind=kind)
    raise ValueError(f"unknown mode {mode!r}")


def cmd_retrieve(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    kind = cfg.distance if not isinstance(cfg.distance, HardDTW) else EuclInterp()
    if args.metric:
        # metric override keeps the training-time interpolation direction
        base_dir = kind.direction if isinstance(kind, EuclInterp) else "v2a"
        d = {"metric": args.metric, "direction": base_dir, "gamma": args.gamma,
             "epsilon": args.epsilon, "iters": args.iters, "pos_weight": args.pos_weight}
        kind = kind_from_dict(d)
    mode = _mode_from_args(args.mode, args.k, kind)
    _log_config("retrieve", {"ckpt": args.ckpt, "manifest": args.manifest, "mode": args.mode,
                             "k": args.k, "direction": args.direction,
                             "kind": kind_to_dict(kind), "out": args.out})
    pairs = load_manifest(args.manifest).load_pairs()
    encoded = encode_pairs(params, pairs, cfg.distance)
    report = retrieve_pairs(encoded, encoded, mode, args.direction)
    write_report_tsv([report], args.out)
    rankings_path = str(args.out) + ".rankings.tsv"
    with open(rankings_path, "w", encoding="utf-8") as fh:
        fh.write("query_id\trank\tcandidate_id\n")
        for qid, ranked in zip(report.query_ids, report.rankings):
            for rank, cid in enumerate(ranked, start=1):
                fh.write(f"{qid}\t{rank}\t{cid}\n")
    print(format_report_table([report]))
    return 0


def cmd_bench(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    kind = cfg.distance if not isinstance(cfg.distance, HardDTW) else EuclInterp()
    modes = []
    for token in args.modes.split(","):
        token = token.strip()
        if token == "agg":
            modes.append(Agg())
        elif token == "seq":
            modes.append(Seq(kind))
        elif token.startswith("hybrid:"):
            modes.append(Hybrid(k=int(token.split(":", 1)[1]), kind=kind))
        else:
            raise ValueError(f"unknown mode token {token!r} (use agg, seq, hybrid:<k>)")
    _log_config("bench", {"ckpt": args.ckpt, "queries": args.queries,
                          "candidates": args.candidates, "modes": args.modes,
                          "workers": args.workers, "out": args.out})
    query_pairs = encode_pairs(params, load_manifest(args.queries).load_pairs(), cfg.distance)
    candidate_pairs = encode_pairs(params, load_manifest(args.candidates).load_pairs(), cfg.distance)
    reports = bench(query_pairs, candidate_pairs, modes)
    write_report_tsv(reports, args.out)
    print(format_report_table(reports))
    return 0


def cmd_gradcheck(args) -> int:
    targets = None if args.target in (None, "all") else [args.target]
    _log_config("gradcheck", {"target": args.target or "all", "threshold": args.threshold})
    reports = run_gradcheck(targets, threshold=args.threshold)
    for rep in reports:
        print(rep.line())
    return 0 if all(rep.passed for rep in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqcontrast",
                                     description="sequential contrastive learning toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic paired dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--dim-v", type=int, default=32)
    p.add_argument("--dim-a", type=int, default=24)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--len-v", type=int, default=48)
    p.add_argument("--len-a", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--distractor-corr", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("dist", help="distance between two SEQF files")
    _add_kernel_flags(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("pairwise", help="pairwise distance matrix between two manifests")
    _add_kernel_flags(p)
    p.add_argument("--videos", required=True)
    p.add_argument("--audios", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairwise)

    p = sub.add_parser("train", help="train encoders with a contrastive loss")
    p.add_argument("--manifest", required=True)
    p.add_argument("--loss", required=True, choices=("cav", "scav", "multi"))
    _add_kernel_flags(p, with_stage=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=7e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--no-dist-norm", action="store_true")
    p.add_argument("--lambda-init", type=float, default=1.0)
    p.add_argument("--tau-init", type=float, default=0.07)
    p.add_argument("--multitask-weight", type=float, default=0.5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--val-manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="run one retrieval mode over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True, choices=("agg", "seq", "hybrid"))
    p.add_argument("--direction", required=True, choices=("a2v", "v2a"))
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--metric", choices=METRICS, default=None)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--pos-weight", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("bench", help="recall/latency table across retrieval modes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--modes", required=True, help="comma list: agg, seq, hybrid:<k>")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all gradients")
    p.add_argument("--target", default=None, help="target name or 'all'")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
