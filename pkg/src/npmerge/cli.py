"""``npmerge`` command-line driver.

Exit codes: 0 success, 2 bad config or input, 3 incompatible models,
4 non-finite numbers detected.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .align import align, apply_alignment
from .config import ConfigError, load_config, load_task, mlp_spec, split_parts, train_config
from .data import FormatError, LabeledDataset, load_idx_dataset, save_idx_dataset, subsample_per_class
from .merge import (MergeConfig, MergeReport, barrier, ensemble_eval, finetune, np_optimize,
                    uniform_merge)
from .multimerge import all_to_one_average, pairwise_merge_tree
from .nn import bn_reset, evaluate, init_params, train_model
from .numerics import DimensionError

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class NumericError(RuntimeError):
    pass


def _jobs(requested: int | None) -> int:
    cap = int(os.environ.get("NPMK_THREADS", "0") or 0)
    n = requested or 1
    return max(1, min(n, cap) if cap > 0 else n)


def _write_csv(path: Path, header, rows, append: bool = False) -> None:
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerows(rows)


def _dataset(prefix: str, num_classes: int) -> LabeledDataset:
    for suffix in (".images.idx", ".labels.idx"):
        if not Path(prefix + suffix).exists():
            raise FileNotFoundError(prefix + suffix)
    return load_idx_dataset(prefix, num_classes=num_classes)


def _finite(model) -> None:
    if not all(np.all(np.isfinite(v)) for _, v in model.tensors()):
        raise NumericError("non-finite parameters detected")


_PATH_ARGS = ("ckpt_a", "ckpt_b", "ckpts", "ckpt", "opt_data", "eval_data", "data", "probe")


def _digest(path: str) -> str:
    """Content digest of a checkpoint or of an IDX dataset prefix."""
    files = [Path(path)] if Path(path).is_file() else [Path(path + s) for s in (".images.idx", ".labels.idx")]
    h = hashlib.sha256()
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _args_hash(args) -> str:
    """Hash of the command's arguments; input files enter by content, not by path."""
    doc = {}
    for k, v in vars(args).items():
        if k in ("func", "out", "jobs"):
            continue
        if k in _PATH_ARGS and v is not None:
            v = [_digest(p) for p in v] if isinstance(v, list) else _digest(v)
        doc[k] = v
    return ckpt.config_hash(doc)


# ------------------------------------------------------------------ commands


def cmd_split_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_task(cfg)
    save_idx_dataset(out / "train", train)
    save_idx_dataset(out / "test", test)
    for seed in cfg["seeds"]:
        for j, part in enumerate(split_parts(cfg, train, seed)):
            save_idx_dataset(out / f"part_s{seed}_p{j}", part)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    chash = ckpt.config_hash(cfg)
    spec = mlp_spec(cfg)
    train, test = load_task(cfg)
    if train.dim != spec.layer_widths[0] or train.num_classes > spec.num_classes:
        raise ConfigError(f"config field architecture/layer_widths: data has {train.dim} features "
                          f"and {train.num_classes} classes")
    save_idx_dataset(out / "train", train)
    save_idx_dataset(out / "test", test)

    jobs = []
    for seed in cfg["seeds"]:
        shared = init_params(spec, seed) if cfg["train"]["shared_init"] else None
        for j, part in enumerate(split_parts(cfg, train, seed)):
            jobs.append((seed, j, part, shared))

    def run(job):
        seed, j, part, shared = job
        tcfg = train_config(cfg, seed * 1000 + j)
        model, hist = train_model(spec, part, tcfg, init=shared)
        _finite(model)
        name = f"model_s{seed}_p{j}.npmk"
        ckpt.save_model(out / name, model, {"seed": seed, "part": j, "config_hash": chash,
                                            "provenance": part.provenance})
        acc, loss = evaluate(model, test)
        last = hist[-1] if hist else {"train_loss": float("nan"), "train_acc": float("nan")}
        return [seed, j, len(part), last["train_loss"], last["train_acc"], acc, loss, name]

    with ThreadPoolExecutor(_jobs(args.jobs)) as pool:
        rows = list(pool.map(run, jobs))
    _write_csv(out / "metrics.csv", ["seed", "part", "n_train", "train_loss", "train_acc",
                                     "test_acc", "test_loss", "checkpoint"], rows)
    print(f"{len(rows)} checkpoints in {out}")
    return EXIT_OK


def _load_pair(a_path, b_path, force: bool):
    _, a, meta_a = ckpt.load(a_path)
    _, b, meta_b = ckpt.load(b_path)
    if not isinstance(a, type(b)) or not hasattr(a, "spec"):
        raise CliError("both checkpoints must hold models", EXIT_INPUT)
    if not force and meta_a.get("config_hash") != meta_b.get("config_hash"):
        raise CliError(f"config hashes differ ({meta_a.get('config_hash')} vs "
                       f"{meta_b.get('config_hash')}); pass --force to merge anyway", EXIT_INPUT)
    if a.spec != b.spec:
        raise CliError(f"incompatible architectures: {a.spec.layer_widths} vs {b.spec.layer_widths}",
                       EXIT_COMPAT)
    return a, b


def _opt_data(args, num_classes: int) -> tuple[LabeledDataset, str]:
    data = _dataset(args.opt_data, num_classes)
    if args.budget in (None, "full"):
        return data, "full"
    k = int(args.budget)
    return subsample_per_class(data, k, args.seed), f"{k}/class"


def cmd_merge(args) -> int:
    a, b = _load_pair(args.ckpt_a, args.ckpt_b, args.force)
    opt, budget = _opt_data(args, a.spec.num_classes)
    evald = _dataset(args.eval_data, a.spec.num_classes) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = MergeConfig(args.lr, args.epochs, args.batch_size, "adam", args.alpha_init, args.seed)
    chash = _args_hash(args)
    perms = align(a, b, args.align, probe=opt, seed=args.seed)
    ckpt.save_permset(out / "perms.npmk", perms, {"config_hash": chash})
    (out / "perms.json").write_text(perms.to_json())
    bp = apply_alignment(b, perms)

    report = MergeReport(args.method, args.align, args.seed, budget, config_hash=chash)
    if args.method == "np":
        alphas, merged, report = np_optimize(a, bp, opt, mcfg, eval_data=evald, prior=args.align,
                                             budget=budget)
        report.config_hash = chash
        ckpt.save_alphas(out / "alphas.npmk", alphas, a, {"config_hash": chash})
    elif args.method in ("direct_avg", "uniform"):
        alpha = 0.5 if args.method == "direct_avg" else args.alpha
        merged = uniform_merge(a, bp, alpha)
        if merged.has_batchnorm():
            merged = bn_reset(merged, opt)
    elif args.method == "finetune":
        start = uniform_merge(a, bp, 0.5)
        if start.has_batchnorm():
            start = bn_reset(start, opt)
        merged = finetune(start, opt, mcfg)
    elif args.method == "ensemble":
        merged = None
        if evald is not None:
            report.acc = ensemble_eval([a, bp], evald)
    else:
        raise CliError(f"unknown method {args.method}", EXIT_INPUT)

    if merged is not None:
        _finite(merged)
        ckpt.save_model(out / "merged.npmk", merged, {"config_hash": chash, "method": args.method})
        if evald is not None and args.method != "np":
            report.acc, report.loss = evaluate(merged, evald)
    report.wall_time = 0.0 if args.deterministic else report.wall_time
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "reports.csv", MergeReport.CSV_COLUMNS, [report.csv_row()], append=True)
    print(json.dumps({"method": report.method, "acc": report.acc, "alpha_mean": report.alpha_mean,
                      "alpha_std": report.alpha_std}))
    return EXIT_OK


def cmd_barrier(args) -> int:
    a, b = _load_pair(args.ckpt_a, args.ckpt_b, args.force)
    data = _dataset(args.data, a.spec.num_classes)
    probe = _dataset(args.probe, a.spec.num_classes) if args.probe else data
    bp = apply_alignment(b, align(a, b, args.align, probe=probe, seed=args.seed))
    res = barrier(a, bp, data, args.points, bn_data=probe)
    rows = list(zip(res.alphas, res.losses, res.accuracies))
    if args.out:
        _write_csv(Path(args.out), ["alpha", "loss", "accuracy"], rows)
    else:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["alpha", "loss", "accuracy"])
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    print(json.dumps({"loss_barrier": res.loss_barrier, "acc_barrier": res.acc_barrier,
                      "max_loss": res.max_loss, "min_acc": res.min_acc}), file=sys.stderr)
    return EXIT_OK


def cmd_multimerge(args) -> int:
    models = [ckpt.load_model(p) for p in args.ckpts]
    if len(models) < 2:
        raise CliError("multimerge needs at least two checkpoints", EXIT_INPUT)
    if any(m.spec != models[0].spec for m in models):
        raise CliError("checkpoints have different architectures", EXIT_COMPAT)
    classes = models[0].spec.num_classes
    opt, budget = _opt_data(args, classes)
    evald = _dataset(args.eval_data, classes) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = MergeConfig(args.lr, args.epochs, args.batch_size, "adam", args.alpha_init, args.seed)
    chash = _args_hash(args)
    final, tree, reports = pairwise_merge_tree(models, opt, mcfg, args.seed)
    _finite(final)
    ckpt.save_model(out / "final.npmk", final, {"config_hash": chash, "num_models": len(models)})
    for node in tree.nodes:
        if node.method == "leaf":
            node.checkpoint = str(args.ckpts[node.id])
    tree.root.checkpoint = str(out / "final.npmk")
    (out / "tree.json").write_text(tree.to_json())
    report = MergeReport("np_tree", "permute", args.seed, budget, num_models=len(models),
                         config_hash=chash)
    report.loss_curve = [r.loss_curve[-1] if r.loss_curve else None for r in reports]
    baseline = MergeReport("all_to_one_permute", "permute", args.seed, budget,
                           num_models=len(models), config_hash=chash)
    if evald is not None:
        report.acc, report.loss = evaluate(final, evald)
        avg = all_to_one_average(models, opt)
        baseline.acc, baseline.loss = evaluate(avg, evald)
    (out / "report.json").write_text(report.to_json())
    (out / "report_all_to_one.json").write_text(baseline.to_json())
    print(json.dumps({"num_models": len(models), "rounds": len(tree.rounds),
                      "alpha_epochs": (len(models) - 1) * mcfg.epochs, "acc": report.acc,
                      "all_to_one_acc": baseline.acc}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = ckpt.load_model(args.ckpt)
    data = _dataset(args.data, model.spec.num_classes)
    acc, loss = evaluate(model, data)
    print(json.dumps({"accuracy": acc, "loss": loss, "n": len(data)}))
    return EXIT_OK


def collect_reports(directory) -> list[dict]:
    """Every MergeReport JSON below ``directory``, sorted by (method, seed, path)."""
    found = []
    for path in sorted(Path(directory).rglob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(doc, dict) and "method" in doc and "prior" in doc:
            found.append((doc, str(path)))
    found.sort(key=lambda t: (t[0]["method"], t[0]["seed"], t[1]))
    return [d for d, _ in found]


def cmd_report(args) -> int:
    directory = Path(args.dir)
    if not directory.is_dir():
        raise FileNotFoundError(str(directory))
    reports = collect_reports(directory)
    rows = [[r.get(c) for c in MergeReport.CSV_COLUMNS] + [r.get("num_models", 2)] for r in reports]
    header = list(MergeReport.CSV_COLUMNS) + ["num_models"]
    out = Path(args.out) if args.out else directory / "summary.csv"
    _write_csv(out, header, rows)
    # accuracy against the number of merged models, averaged over seeds
    table: dict[tuple[str, int], list[float]] = {}
    for r in reports:
        if r.get("acc") is not None:
            table.setdefault((r["method"], int(r.get("num_models", 2))), []).append(r["acc"])
    m_rows = [[method, m, float(np.mean(v)), len(v)] for (method, m), v in sorted(table.items())]
    _write_csv(out.with_name("accuracy_vs_m.csv"), ["method", "num_models", "mean_acc", "runs"], m_rows)
    print(f"{len(rows)} reports -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _merge_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--opt-data", required=True, help="IDX prefix of the optimization data")
    p.add_argument("--eval-data", help="IDX prefix of the test data")
    p.add_argument("--budget", default="full", help="'full' or examples per class")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--alpha-init", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--jobs", type=int, default=None, help="parallel jobs (capped by NPMK_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split-data", help="write the task's train/test sets and split parts as IDX")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split_data)

    p = sub.add_parser("train", help="train one model per (seed, split part)")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="align and merge two checkpoints")
    p.add_argument("ckpt_a")
    p.add_argument("ckpt_b")
    p.add_argument("--align", choices=["none", "permute", "weight_matching"], default="permute")
    p.add_argument("--method", choices=["direct_avg", "uniform", "np", "finetune", "ensemble"],
                   default="np")
    p.add_argument("--alpha", type=float, default=0.5, help="coefficient for --method uniform")
    p.add_argument("--deterministic", action="store_true", help="zero the wall-time field")
    _merge_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("barrier", help="loss/accuracy along the interpolation path")
    p.add_argument("ckpt_a")
    p.add_argument("ckpt_b")
    p.add_argument("--align", choices=["none", "permute", "weight_matching"], default="none")
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--data", required=True)
    p.add_argument("--probe", help="IDX prefix for alignment and BN reset (default: --data)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_barrier)

    p = sub.add_parser("multimerge", help="pairwise NP merge tree over many checkpoints")
    p.add_argument("ckpts", nargs="+")
    _merge_flags(p)
    p.set_defaults(func=cmd_multimerge)

    p = sub.add_parser("eval", help="accuracy and loss of a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate MergeReport JSON files into CSV tables")
    p.add_argument("dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"npmerge: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"npmerge: no such file: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, FormatError, ckpt.CheckpointError) as exc:
        print(f"npmerge: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DimensionError as exc:
        print(f"npmerge: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (NumericError, FloatingPointError) as exc:
        print(f"npmerge: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"npmerge: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
