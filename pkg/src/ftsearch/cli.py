"""Command-line entry point: ``ftsearch <command> [flags]``.

Every command writes one JSON report (``--report``, default
``<command>.report.json``) and prints a one-line summary on stdout.

Exit codes: 0 success, 1 gradcheck above tolerance, 2 bad flags,
3 data or checkpoint errors, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import checks
from . import datasets as ds
from . import pretrain as pt
from . import search as se
from . import strategy as st
from .finetune import FinetuneConfig, finetune
from .graph import GraphError

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

STRATEGY_ALIASES = {"fe": "feature_extractor", "lastk": "last_k"}


class UsageError(Exception):
    pass


def default_seed():
    env = os.environ.get("FTSEARCH_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FTSEARCH_SEED must be an integer, got {env!r}") from None


def _write_report(args, config, seed, result, artifacts, started):
    report = {
        "command": [args.command] + args.argv,
        "config": config,
        "seed": seed,
        "result": result,
        "artifacts": artifacts,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path = Path(args.report or f"{args.command}.report.json")
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return str(path)


def _checked(factory, **kwargs):
    """Build a config object, reporting invalid flag values as usage errors."""
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None


def _load_data(path):
    manifest, graphs = ds.load_jsonl(path)
    return manifest, graphs


def _splits(graphs, mode, seed):
    return ds.split_graphs(graphs, mode, seed=seed)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, started):
    seed = args.seed
    manifest, graphs = _load_data(args.data)
    cfg = _checked(
        bb.BackboneConfig,
        conv_kind=args.conv,
        num_layers=args.layers,
        hidden_dim=args.hidden,
        node_feat_cardinalities=tuple(manifest.node_feat_cardinalities),
        edge_feat_cardinalities=tuple(manifest.edge_feat_cardinalities),
        gat_heads=args.gat_heads,
        dropout_rate=args.dropout,
    )
    history = []
    common = dict(seed=seed, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, history=history)
    if args.objective == "edgepred":
        ckpt = pt.pretrain_edgepred(graphs, cfg, **common)
    else:
        ckpt = pt.pretrain_attrmask(graphs, cfg, mask_rate=args.mask_rate, **common)
    pt.save(ckpt, args.out)
    config = {"backbone": cfg.to_dict(), "objective": args.objective, "epochs": args.epochs,
              "batch_size": args.batch_size, "lr": args.lr, "mask_rate": args.mask_rate, "data": args.data}
    result = {"loss_history": history, "num_params": ckpt.num_params()}
    path = _write_report(args, config, seed, result, [args.out], started)
    final = f"{history[-1]:.4f}" if history else "n/a"
    print(f"pretrain {args.objective} {args.conv}: {ckpt.num_params()} params, final loss {final} -> {args.out} (report {path})")
    return EXIT_OK


def _ft_config(args, seed, strategy="vanilla"):
    return _checked(
        FinetuneConfig,
        strategy=strategy,
        k=getattr(args, "k", None),
        adapter_m=getattr(args, "m", 4),
        l2sp_lambda=getattr(args, "lam", 1e-2),
        lr=args.lr,
        batch_size=args.batch_size,
        dropout=args.dropout,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=seed,
    )


def _backbone_delta(ckpt, model):
    return max(float(np.max(np.abs(model.params[n].data - t.data), initial=0.0)) for n, t in ckpt.params.items())


def _seed_list(args):
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    return [args.seed]


def summarize(values):
    """Mean and population standard deviation of per-seed metrics."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def cmd_finetune(args, started):
    strategy = STRATEGY_ALIASES.get(args.strategy, args.strategy)
    if strategy == "last_k" and args.k is None:
        raise UsageError("--strategy lastk requires --k")
    ckpt = pt.load(args.checkpoint)
    manifest, graphs = _load_data(args.data)
    choice = st.StrategyChoice.from_json(Path(args.choice).read_text()) if args.choice else None
    seeds = _seed_list(args)
    splits = _splits(graphs, args.split, args.split_seed)
    runs = []
    for seed in seeds:
        cfg = _ft_config(args, seed, strategy)
        model, report = finetune(ckpt, choice, splits, cfg, manifest.task_type)
        runs.append({"seed": seed, "report": report.to_dict(), "backbone_max_abs_delta": _backbone_delta(ckpt, model)})
    agg = summarize([r["report"]["aggregate"] for r in runs])
    config = {"finetune": _ft_config(args, seeds[0], strategy).to_dict(), "seeds": seeds, "split": args.split,
              "split_seed": args.split_seed, "checkpoint": args.checkpoint, "data": args.data,
              "choice": (choice or st.StrategyChoice.vanilla(ckpt.config.num_layers)).to_dict()}
    result = {"runs": runs, "summary": agg}
    if strategy == "feature_extractor":
        result["note"] = "backbone frozen: max abs parameter delta %.1e" % max(r["backbone_max_abs_delta"] for r in runs)
    path = _write_report(args, config, seeds[0], result, [], started)
    metric = "ROC-AUC" if manifest.task_type == "classification" else "RMSE"
    print(f"finetune {strategy}: test {metric} {agg['mean']:.4f} +/- {agg['std']:.4f} over {agg['n']} seed(s) (report {path})")
    return EXIT_OK


def cmd_search(args, started):
    ckpt = pt.load(args.checkpoint)
    manifest, graphs = _load_data(args.data)
    seeds = _seed_list(args)
    splits = _splits(graphs, args.split, args.split_seed)
    runs = []
    for seed in seeds:
        scfg = _checked(
            se.SearchConfig, tau_start=args.tau_start, tau_end=args.tau_end, controller_lr=args.controller_lr,
            weight_lr=args.weight_lr, epochs=args.search_epochs, mc_samples=args.mc_samples,
            batch_size=args.batch_size, dropout=args.dropout, seed=seed, ablate=tuple(args.ablate or ()),
        )
        res = se.search(ckpt, splits[0], splits[1], scfg, manifest.task_type)
        _, report = finetune(ckpt, res.choice, splits, _ft_config(args, seed), manifest.task_type)
        runs.append({"seed": seed, "search": res.to_dict(), "retrain": report.to_dict()})
    agg = summarize([r["retrain"]["aggregate"] for r in runs])
    config = {"search": scfg.to_dict(), "retrain": _ft_config(args, seeds[0]).to_dict(), "seeds": seeds,
              "split": args.split, "split_seed": args.split_seed, "checkpoint": args.checkpoint, "data": args.data}
    path = _write_report(args, config, seeds[0], {"runs": runs, "summary": agg}, [], started)
    c = runs[-1]["search"]["choice"]
    print(f"search: derived id_aug={','.join(c['id_aug'])} fuse={c['fuse']} read={c['read']}; "
          f"retrained test {agg['mean']:.4f} +/- {agg['std']:.4f} over {agg['n']} seed(s) (report {path})")
    return EXIT_OK


def cmd_enumerate(args, started):
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    count = st.enumerate_space(args.layers)
    _write_report(args, {"layers": args.layers}, None, {"count": count}, [], started)
    print(count)
    return EXIT_OK


def cmd_gradcheck(args, started):
    res = checks.run_gradcheck(args.conv, args.seed)
    ok = res["max_rel_error"] < GRADCHECK_TOL
    res["tolerance"] = GRADCHECK_TOL
    res["passed"] = ok
    path = _write_report(args, {"conv": args.conv}, args.seed, res, [], started)
    print(f"gradcheck {args.conv}: max rel error {res['max_rel_error']:.3e} ({'ok' if ok else 'FAIL'}; report {path})")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_generate(args, started):
    manifest, graphs = ds.generate_synthetic(args.task, args.n_graphs, args.seed)
    ds.write_jsonl(graphs, args.out, manifest)
    mpath = str(ds.manifest_path(args.out))
    _write_report(args, {"task": args.task, "n_graphs": args.n_graphs}, args.seed, {"manifest": manifest.to_dict()},
                  [args.out, mpath], started)
    print(f"generate {args.task}: {len(graphs)} graphs -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $FTSEARCH_SEED or 0)")
    p.add_argument("--report", default=None, help="report JSON path (default: <command>.report.json)")


def _add_training(p, epochs=100):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--split", choices=("random", "by_key"), default="by_key")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; reports mean and std")


def build_parser():
    parser = argparse.ArgumentParser(prog="ftsearch", description="Search and fine-tune pre-trained GNNs.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pre-train a backbone and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--objective", choices=("edgepred", "attrmask"), required=True)
    p.add_argument("--conv", choices=bb.CONV_KINDS, default="gin")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--hidden", type=int, default=300)
    p.add_argument("--gat-heads", type=int, default=2)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--mask-rate", type=float, default=0.15)
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with a fixed strategy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=("vanilla", "l2sp", "fe", "lastk", "adapter") + tuple(STRATEGY_ALIASES.values()),
                   default="vanilla")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-2)
    p.add_argument("--choice", default=None, help="StrategyChoice JSON file (default: vanilla wiring)")
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("search", help="search a fine-tuning strategy, then retrain it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ablate", action="append", choices=("id", "fuse", "read"))
    p.add_argument("--search-epochs", type=int, default=20)
    p.add_argument("--tau-start", type=float, default=5.0)
    p.add_argument("--tau-end", type=float, default=0.1)
    p.add_argument("--controller-lr", type=float, default=3e-3)
    p.add_argument("--weight-lr", type=float, default=1e-3)
    p.add_argument("--mc-samples", type=int, default=1)
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("enumerate", help="count the strategy space")
    p.add_argument("--layers", type=int, default=5)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every model variant")
    p.add_argument("--conv", choices=bb.CONV_KINDS, default="gin")
    _add_common(p)

    p = sub.add_parser("generate", help="write a planted synthetic dataset")
    p.add_argument("--task", choices=sorted(ds.PLANTED), required=True)
    p.add_argument("--n-graphs", type=int, default=1000)
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "search": cmd_search,
    "enumerate": cmd_enumerate,
    "gradcheck": cmd_gradcheck,
    "generate": cmd_generate,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    args.argv = argv[argv.index(args.command) + 1 :]
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.seed is None:
            args.seed = default_seed()
        return COMMANDS[args.command](args, started)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ftsearch {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"ftsearch {args.command}: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ds.DatasetError, pt.CheckpointError, GraphError, OSError, ValueError) as e:
        print(f"ftsearch {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
