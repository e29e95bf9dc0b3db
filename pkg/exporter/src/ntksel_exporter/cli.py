"""CLI for export jobs: embeddings, gradients, adapter warm-up."""
from __future__ import annotations

import argparse
import sys

from .export import ExportJob, export_embeddings, export_gradients, warmup_adapters


def _add_job_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="local model path")
    p.add_argument("--data", required=True, help="JSONL with id/prompt/response")
    p.add_argument("--out", required=True)
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--proj-dim", type=int, default=8192)
    p.add_argument("--grad-scale", type=float, default=1e-5)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--adapter-checkpoint", default=None)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")


def _job(args) -> ExportJob:
    return ExportJob(
        model_path=args.model,
        dataset_path=args.data,
        out_path=args.out,
        proj_seed=args.proj_seed,
        proj_dim=args.proj_dim,
        grad_scale=args.grad_scale,
        rank=args.rank,
        alpha=args.alpha,
        adapter_checkpoint=args.adapter_checkpoint,
        batch_size=args.batch_size,
        device=args.device,
    )


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ntksel-export")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("embeddings", "gradients"):
        p = sub.add_parser(name, help=f"export {name}")
        _add_job_args(p)
    p = sub.add_parser("warmup", help="adapter warm-up training")
    _add_job_args(p)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)

    args = ap.parse_args(argv)
    job = _job(args)
    if args.command == "embeddings":
        digest = export_embeddings(job)
        print(f"{digest}  {args.out}")
    elif args.command == "gradients":
        digest = export_gradients(job)
        print(f"{digest}  {args.out}")
    else:
        path, losses = warmup_adapters(job, steps=args.steps, lr=args.lr)
        first = losses[0] if losses else float("nan")
        last = losses[-1] if losses else float("nan")
        print(f"{path}  loss {first:.4f} -> {last:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
