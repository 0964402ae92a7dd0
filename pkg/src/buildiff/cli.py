"""Command-line entry point.

Exit codes: 0 ok, 1 internal error, 2 missing stage dependency,
3 unreadable input, 4 data mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_params
from .conditioner import encode, load_pgm
from .datagen import build_dataset
from .diffusion import sample_base, sample_upsampled
from .denoiser import make_model
from .geometry import (PointCloud, load_bpc, load_ply, load_xyz, save_bpc,
                       save_ply, save_xyz)
from .metrics import evaluate_pair, write_report_jsonl
from .pipeline import (STAGES, StageDependencyError, TrainConfig, run_training,
                       toy_config)
from .schedule import linear_beta_schedule

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_DEPENDENCY = 2
EXIT_INPUT = 3
EXIT_MISMATCH = 4

CLOUD_LOADERS = {".ply": load_ply, ".bpc": load_bpc, ".xyz": load_xyz}
CLOUD_SAVERS = {".ply": save_ply, ".bpc": save_bpc, ".xyz": save_xyz}


def _config_help() -> str:
    lines = ["config keys (key=value file, overridable with --set):"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"  {f.name} (default {f.default})")
    return "\n".join(lines)


def _load_config(args) -> TrainConfig:
    cfg = toy_config() if getattr(args, "toy", False) else TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.load(args.config)
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        setattr(cfg, key, type(current)(value))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_cloud(path: Path) -> PointCloud:
    loader = CLOUD_LOADERS.get(path.suffix)
    if loader is None:
        raise IOError(f"unsupported cloud format {path.suffix!r}")
    return loader(path)


def _cmd_gen_data(args) -> int:
    build_dataset(args.out, n_train=args.n_train, n_test=args.n_test,
                  roof_mix=tuple(args.roof_mix.split(",")),
                  n_points=args.n_points, resolution=args.resolution,
                  seed=args.seed)
    print(f"dataset written to {args.out} "
          f"({args.n_train} train / {args.n_test} test)")
    return EXIT_OK


def _cmd_train(stage: str):
    def run(args) -> int:
        cfg = _load_config(args)
        try:
            ckpt = run_training(args.dataset, cfg, stage, args.out,
                                resume=args.resume)
        except StageDependencyError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DEPENDENCY
        print(f"checkpoint written to {ckpt}")
        return EXIT_OK
    return run


def _model_params(blob):
    return {k: v for k, v in blob.items() if not k.startswith("opt.")}


def _cmd_sample(args) -> int:
    ckpt_dir = Path(args.checkpoints)
    needed = ["autoencoder", "base"] + (["upsampler"] if args.high_res else [])
    for stage in needed:
        if not (ckpt_dir / f"{stage}.bdif").exists():
            print(f"error: missing checkpoint for stage '{stage}' in {ckpt_dir}",
                  file=sys.stderr)
            return EXIT_DEPENDENCY
    try:
        img = load_pgm(args.image)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read image: {exc}", file=sys.stderr)
        return EXIT_INPUT
    cfg = TrainConfig.load(ckpt_dir / "base.config")
    ae_params = load_params(ckpt_dir / "autoencoder.bdif", requires_grad=False)
    base_params = _model_params(
        load_params(ckpt_dir / "base.bdif", requires_grad=False))
    z_I = encode(ae_params, img).values

    schedule = linear_beta_schedule(cfg.T, cfg.beta_1, cfg.beta_T, cfg.sigma_mode)
    stride = args.trace_stride
    cloud, trace = sample_base(make_model(base_params), z_I, cfg.K,
                               args.gamma, args.seed, schedule,
                               trace_stride=stride)
    steps = cfg.T
    if args.high_res:
        up_params = _model_params(
            load_params(ckpt_dir / "upsampler.bdif", requires_grad=False))
        up_schedule = linear_beta_schedule(cfg.T_upsampler, cfg.beta_1,
                                           cfg.beta_T, cfg.sigma_mode)
        cloud, trace = sample_upsampled(make_model(up_params), z_I, cloud,
                                        cfg.N, args.gamma, args.seed + 1,
                                        up_schedule, trace_stride=stride)
        steps += cfg.T_upsampler
    out = Path(args.out)
    saver = CLOUD_SAVERS.get(out.suffix, save_ply)
    saver(out, cloud)
    if stride and args.trace_dir:
        tdir = Path(args.trace_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        for t, snap in trace.snapshots:
            save_ply(tdir / f"trace_{t:05d}.ply", PointCloud(snap))
    print(f"seed={args.seed} gamma={args.gamma} steps={steps} -> {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    ref_dir = Path(args.ref)

    def ids_of(d: Path) -> dict[str, Path]:
        return {p.stem: p for p in sorted(d.iterdir())
                if p.suffix in CLOUD_LOADERS}

    preds = ids_of(pred_dir)
    refs = ids_of(ref_dir)
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        print("error: unmatched ids: " + ", ".join(missing), file=sys.stderr)
        return EXIT_MISMATCH
    ids = sorted(preds)
    threads = int(os.environ.get("BUILDIFF_THREADS", "4"))

    def one(pair_id: str):
        return evaluate_pair(_load_cloud(preds[pair_id]),
                             _load_cloud(refs[pair_id]),
                             emd_mode=args.emd_mode, seed=args.seed)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports = list(pool.map(one, ids))  # map preserves id order
    rows = list(zip(ids, reports))
    summary = write_report_jsonl(args.out, rows)
    print(f"{'id':>12} {'CDx100':>10} {'EMDx100':>10} {'F1':>8}")
    for pair_id, rep in rows:
        print(f"{pair_id:>12} {rep.cd_scaled:>10.4f} {rep.emd_scaled:>10.4f} "
              f"{rep.f1:>8.3f}")
    print(f"{'mean':>12} {summary['cd_scaled']:>10.4f} "
          f"{summary['emd_scaled']:>10.4f} {summary['f1']:>8.3f}")
    return EXIT_OK


def _cmd_export(args) -> int:
    src = Path(args.input)
    dst = Path(args.out)
    try:
        cloud = _load_cloud(src)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    saver = CLOUD_SAVERS.get(dst.suffix)
    if saver is None:
        print(f"error: unsupported output format {dst.suffix!r}", file=sys.stderr)
        return EXIT_INPUT
    saver(dst, cloud)
    print(f"{src} -> {dst} ({cloud.count} points)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="buildiff",
        description="Image-conditional two-stage point cloud diffusion for buildings",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--roof-mix", default="flat,gable",
                   help="comma list drawn round-robin (flat,gable,hip)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    for stage, name in [("autoencoder", "train-ae"), ("base", "train-base"),
                        ("upsampler", "train-upsampler")]:
        p = sub.add_parser(name, help=f"train the {stage} stage")
        p.add_argument("--dataset", required=True)
        p.add_argument("--out", required=True, help="checkpoint directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--toy", action="store_true", help="use the toy preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--resume", action="store_true")
        p.set_defaults(fn=_cmd_train(stage))

    p = sub.add_parser("sample", help="sample a cloud conditioned on a silhouette")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--image", required=True, help="PGM silhouette")
    p.add_argument("--out", required=True, help="output cloud (.ply/.bpc/.xyz)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--high-res", action="store_true",
                   help="run the upsampler stage after the base stage")
    p.add_argument("--trace-stride", type=int, default=0)
    p.add_argument("--trace-dir")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("eval", help="evaluate prediction/reference pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True, help="JSON-lines report path")
    p.add_argument("--emd-mode", choices=["exact", "approx"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("export", help="convert a cloud between formats")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
