"""Command-line orchestration of the selection pipeline and diagnostics.

Subcommands: preselect, features, score, select, pipeline, probe, krr, demo.
Every command is deterministic given its flags, input files, and --seed;
deterministic results go to stdout and output files, wall-clock timing
tables go to stderr.

Exit codes: 0 success, 1 assertion/identity failure, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import demo as demo_mod
from . import dynamics_probe, feature_store, kernel, krr, preselect, select, toy_model
from .domain import PipelineConfig, SampleId, validate_config
from .errors import (
    DemoAssertionFailed,
    IdentityCheckFailed,
    NtkselError,
)
from .projection import ProjectionSpec
from .toy_model import ToyDataset, ToyNetwork

# Table-shaped stage report: (key, complexity) in pipeline order
_STAGES = (
    ("warm_up", "O(|D|)"),
    ("embedding", "O(|C|)"),
    ("knn", "O(|C| * M)"),
    ("gradient", "O(M)"),
    ("ntk_selection", "O(M * N)"),
)


def _print_stage_table(timings: dict[str, float]) -> None:
    print("stage             complexity    seconds", file=sys.stderr)
    for key, cx in _STAGES:
        if key in timings:
            print(f"{key:<17s} {cx:<13s} {timings[key]:8.3f}", file=sys.stderr)


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--json", action="store_true", help="machine-readable stdout")
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap BLAS worker threads (default: NTKSEL_THREADS or library default)",
    )


def _load_inputs_npz(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = np.load(path)
    if "X" not in data:
        raise NtkselError(f"{path}: expected an 'X' array")
    return data["X"], data.get("seq_lens")


def _build_net(args) -> ToyNetwork:
    if getattr(args, "net", None):
        return toy_model.load_network(args.net)
    return ToyNetwork.random(seed=args.seed)


# -- subcommand implementations ---------------------------------------------


def cmd_preselect(args) -> int:
    _, d_emb = feature_store.read_all(args.domain_emb)
    _, c_emb = feature_store.read_all(args.cand_emb)
    table = preselect.accelerated_knn_relevance(d_emb, c_emb, args.knn_k)
    chosen = preselect.top_m(table, min(args.preselect_size, len(table.cand_ids)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "relevance.json").write_text(table.to_json())
    (out / "preselected.json").write_text(
        json.dumps([str(c) for c in chosen], indent=2) + "\n"
    )
    _emit(
        args,
        {"preselected": len(chosen), "candidates": len(table.cand_ids)},
        f"pre-selected {len(chosen)} of {len(table.cand_ids)} candidates -> {out}",
    )
    return 0


def cmd_features(args) -> int:
    net = _build_net(args)
    X, seq_lens = _load_inputs_npz(args.data)
    ids = [SampleId(args.tag, i) for i in range(X.shape[0])]
    if args.kind == "embedding":
        records = toy_model.embedding_records(net, X, ids)
        header = feature_store.FeatureFileHeader(
            kind="embedding",
            dim=records[0].vector.shape[0] if records else 1,
            count=len(records),
        )
    else:
        proj = None
        if args.proj_dim > 0:
            proj = ProjectionSpec(
                seed=args.proj_seed,
                source_dim=net.adapter_param_count,
                target_dim=args.proj_dim,
            )
        records = toy_model.gradient_feature_records(
            net,
            X,
            ids,
            proj,
            grad_scale=args.grad_scale,
            seq_lens=None if seq_lens is None else [int(s) for s in seq_lens],
            normalize_by_seq_len=not args.no_normalize,
        )
        header = toy_model.feature_header(net, proj, len(records))
    digest = feature_store.write_features(args.out, header, records)
    _emit(
        args,
        {"records": len(records), "dim": header.dim, "sha256": digest},
        f"wrote {len(records)} {args.kind} records (dim {header.dim}) -> {args.out}",
    )
    return 0


def cmd_score(args) -> int:
    dh, d_feats = feature_store.read_all(args.domain_feat)
    ch, c_feats = feature_store.read_all(args.cand_feat)
    km = kernel.assemble_kernel_matrix(
        d_feats, c_feats, domain_seed=dh.proj_seed, cand_seed=ch.proj_seed
    )
    scores = select.utility_scores(km)
    # diagnostic only: per-candidate norm-normalized (cosine-style) scores;
    # selection always ranks by the raw kernel means
    norms = {r.id: float(np.linalg.norm(r.vector.astype(np.float64))) for r in c_feats}
    normalized = [
        s / norms[cid] if norms[cid] > 0 else 0.0
        for cid, s in zip(scores.cand_ids, scores.scores)
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernel.write_kernel(out / "kernel.bin", km)
    (out / "scores.json").write_text(
        json.dumps(
            {
                "ids": [str(c) for c in scores.cand_ids],
                "scores": scores.scores.tolist(),
                "normalized_scores": normalized,
            },
            sort_keys=True,
        )
        + "\n"
    )
    _emit(
        args,
        {"rows": len(km.row_ids), "cols": len(km.col_ids)},
        f"scored {len(km.col_ids)} candidates against {len(km.row_ids)} domain samples -> {out}",
    )
    return 0


def cmd_select(args) -> int:
    data = json.loads(Path(args.scores).read_text())
    scores = select.UtilityScores(
        [SampleId.parse(s) for s in data["ids"]], np.asarray(data["scores"])
    )
    result = select.select_top_n(scores, args.n_select)
    Path(args.out).write_text(result.to_jsonl())
    _emit(
        args,
        {"selected": len(result.selected)},
        f"selected top {len(result.selected)} -> {args.out}",
    )
    return 0


def cmd_pipeline(args) -> int:
    cfg = validate_config(
        PipelineConfig(
            n_select=args.n_select,
            preselect_size=args.preselect_size or 4 * args.n_select,
            knn_k=args.knn_k or max(1, (args.preselect_size or 4 * args.n_select) // 4),
            proj_dim=args.proj_dim,
            proj_seed=args.proj_seed,
        )
    )
    pipe = select.run_pipeline(
        cfg,
        args.domain_emb,
        args.cand_emb,
        args.domain_feat,
        args.cand_feat,
        out_dir=args.out,
    )
    _print_stage_table(pipe.timings)
    _emit(
        args,
        {
            "selected": [str(s) for s in pipe.result.selected],
            "manifest_sha256": pipe.result.manifest_ref,
        },
        "\n".join(str(s) for s in pipe.result.selected),
    )
    return 0


def cmd_probe(args) -> int:
    rng = np.random.default_rng(args.seed)
    net = ToyNetwork.random(seed=args.seed)
    n_probe = args.probe_size
    X = rng.normal(size=(n_probe, net.input_dim))
    teacher = rng.normal(size=(net.input_dim, net.output_dim)) / np.sqrt(net.input_dim)
    task = ToyDataset(X, X @ teacher)
    trace = dynamics_probe.record_trace(
        net, X, task, args.steps, args.lr, args.checkpoint_every
    )
    checks = dynamics_probe.identity_report(trace)
    theorem = dynamics_probe.check_theorem_bound(trace)
    import warnings as _warnings

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        resid = dynamics_probe.reparam_residual(trace)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.json").write_text(trace.to_json())
    with open(out / "cosine_vs_step.tsv", "w") as f:
        f.write("step\tcosine\n")
        for t, s in zip(trace.steps, trace.cosines):
            f.write(f"{t}\t{s!r}\n")
    (out / "theorem_report.json").write_text(theorem.to_json())

    failed = [c.name for c in checks if not c.ok]
    payload = {
        "eps_observed": theorem.eps_observed,
        "bound_satisfied": theorem.satisfied,
        "identities": {c.name: c.max_rel_err for c in checks},
        "reparam_within_bound": bool(resid.within_bound.all()),
        "fd_warning": resid.fd_warning,
    }
    _emit(
        args,
        payload,
        f"eps_observed={theorem.eps_observed:.3e} bound_satisfied={theorem.satisfied} "
        f"identities_ok={not failed} reparam_ok={bool(resid.within_bound.all())}",
    )
    if failed:
        raise IdentityCheckFailed(f"identity checks failed: {', '.join(failed)}")
    if not theorem.satisfied:
        raise IdentityCheckFailed("stability bound violated on recorded trace")
    if not resid.fd_warning and not bool(resid.within_bound.all()):
        raise IdentityCheckFailed("reparameterized perturbation exceeded its bound")
    return 0


def cmd_krr(args) -> int:
    if not args.features and not args.kernel:
        raise NtkselError("krr needs --features or --kernel")
    labels_by_id = json.loads(Path(args.labels).read_text())
    if args.kernel:
        km = kernel.read_kernel(args.kernel)
        if km.row_ids != km.col_ids:
            raise NtkselError(
                f"{args.kernel}: KRR needs a square kernel over one sample set"
            )
        labels = [labels_by_id[str(r)] for r in km.row_ids]
    else:
        _, feats = feature_store.read_all(args.features)
        feats = sorted(feats, key=lambda r: r.id)
        labels = [labels_by_id[str(r.id)] for r in feats]
        km = kernel.assemble_kernel_matrix(feats, feats)
    n = len(labels)
    rng = np.random.default_rng(args.seed)
    val_idx = rng.choice(n, size=max(1, int(args.val_fraction * n)), replace=False)
    val_mask = np.zeros(n, dtype=bool)
    val_mask[val_idx] = True
    tr, va = ~val_mask, val_mask
    grid = [float(x) for x in args.grid.split(",")] if args.grid else list(krr.DEFAULT_LAMBDA_GRID)
    sweep = krr.lambda_sweep(
        km.values[np.ix_(tr, tr)],
        [l for l, m in zip(labels, tr) if m],
        km.values[np.ix_(va, tr)],
        [l for l, m in zip(labels, va) if m],
        grid,
    )
    Path(args.out).write_text(sweep.to_json())
    _emit(
        args,
        {"best_lambda": sweep.lam, "accuracy": sweep.accuracy},
        f"best lambda {sweep.lam:g} with validation accuracy {sweep.accuracy:.3f} -> {args.out}",
    )
    return 0


def cmd_demo(args) -> int:
    cfg = demo_mod.DemoConfig(
        seed=args.seed,
        n_domain=args.n_domain,
        n_candidates=args.n_candidates,
        n_select=args.n_select,
        matched_fraction=args.matched_fraction,
        proj_dim=args.proj_dim,
    )
    report = demo_mod.run_demo(cfg, args.out)
    _print_stage_table(report.timings)
    _emit(
        args,
        json.loads(report.to_json()),
        f"selected {report.matched_selected}/{report.n_selected} domain-matched "
        f"(base rate {report.base_rate:.2f}, p={report.p_value:.3g}, "
        f"{'skipped' if report.skipped else 'passed' if report.passed else 'FAILED'})",
    )
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ntksel",
        description="kernel-similarity auxiliary data selection engine",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preselect", help="embedding KNN relevance + Top-M")
    p.add_argument("--domain-emb", required=True)
    p.add_argument("--cand-emb", required=True)
    p.add_argument("-K", "--knn-k", type=int, required=True)
    p.add_argument("-M", "--preselect-size", type=int, required=True)
    p.add_argument("--out", default="preselect_out")
    _add_common(p)
    p.set_defaults(fn=cmd_preselect)

    p = sub.add_parser("features", help="toy-network feature/embedding export")
    p.add_argument("--data", required=True, help=".npz with X (and optional seq_lens)")
    p.add_argument("--kind", choices=["gradient", "embedding"], default="gradient")
    p.add_argument("--net", help="toynet snapshot to load (default: seeded random)")
    p.add_argument("--tag", default="sample")
    p.add_argument("--proj-dim", type=int, default=8192, help="0 disables projection")
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--grad-scale", type=float, default=1e-5)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("score", help="kernel matrix + utility scores")
    p.add_argument("--domain-feat", required=True)
    p.add_argument("--cand-feat", required=True)
    p.add_argument("--out", default="score_out")
    _add_common(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("select", help="Top-N from a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("-N", "--n-select", type=int, required=True)
    p.add_argument("--out", default="selection.jsonl")
    _add_common(p)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("pipeline", help="end-to-end selection from feature files")
    p.add_argument("--domain-emb", required=True)
    p.add_argument("--cand-emb", required=True)
    p.add_argument("--domain-feat", required=True)
    p.add_argument("--cand-feat", required=True)
    p.add_argument("-N", "--n-select", type=int, required=True)
    p.add_argument("-M", "--preselect-size", type=int, default=None)
    p.add_argument("-K", "--knn-k", type=int, default=None)
    p.add_argument("--proj-dim", type=int, default=8192)
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--out", default="pipeline_out")
    _add_common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("probe", help="kernel-stability trace and bound checks")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--checkpoint-every", type=int, default=1)
    p.add_argument("--probe-size", type=int, default=16)
    p.add_argument("--out", default="probe_out")
    _add_common(p)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("krr", help="kernel ridge regression validation sweep")
    p.add_argument("--features", help="gradient feature file (kernel assembled here)")
    p.add_argument("--kernel", help="precomputed square kernel container")
    p.add_argument("--labels", required=True, help="JSON map id -> label")
    p.add_argument("--val-fraction", type=float, default=0.3)
    p.add_argument("--grid", default=None, help="comma-separated lambda grid")
    p.add_argument("--out", default="krr_report.json")
    _add_common(p)
    p.set_defaults(fn=cmd_krr)

    p = sub.add_parser("demo", help="synthetic end-to-end selection demo")
    p.add_argument("--n-domain", type=int, default=24)
    p.add_argument("--n-candidates", type=int, default=300)
    p.add_argument("-N", "--n-select", type=int, default=50)
    p.add_argument("--matched-fraction", type=float, default=0.5)
    p.add_argument("--proj-dim", type=int, default=512)
    p.add_argument("--out", default="demo_out")
    _add_common(p)
    p.set_defaults(fn=cmd_demo)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("NTKSEL_THREADS"):
        threads = int(os.environ["NTKSEL_THREADS"])
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.fn(args)
        return args.fn(args)
    except (DemoAssertionFailed, IdentityCheckFailed) as e:
        print(f"ntksel: {e}", file=sys.stderr)
        return 1
    except NtkselError as e:
        print(f"ntksel: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ntksel: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
