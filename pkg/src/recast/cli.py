"""``recast`` command-line entry point.

Exit codes: 0 success, 1 quality threshold not met, 2 usage error,
3 parameter budget violated, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from . import persistence
from .config import RunConfig
from .diagnostics import diagnose
from .exceptions import (BudgetExceededError, FormatError, NonFiniteError, NumericalError, ShapeError,
                         TopologyError, TrainingError)
from .integrate import merge
from .mimicry import run_mimicry
from .core import RecastModel
from .til import ParamBudget, feature_width, pretrain_teacher, run_sequence, trainable_params

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_BUDGET, EXIT_NUMERICAL = 0, 1, 2, 3, 4
EXPECTED_CSVS = ("reconstruction.csv", "loss_curve.csv", "diagnostics_groups.csv", "accuracy.csv")

logger = logging.getLogger("recast")


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _threads() -> int:
    raw = os.environ.get("RECAST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RECAST_THREADS must be an integer >= 1, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"RECAST_THREADS must be an integer >= 1, got {n}")
    return n


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return RunConfig.load(path)
    except ValidationError as exc:
        raise UsageError(f"invalid config {path}:\n{exc}") from None
    except ValueError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def _require_file(path, what) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


# -- commands -------------------------------------------------------------------
def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    config = cfg.recast.build()
    task0 = cfg.til.suite(cfg.recast.width)[0]
    teacher = pretrain_teacher(task0, config, cfg.teacher.build(), cfg.teacher.min_accuracy)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    persistence.save_teacher(teacher, out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args.config)
    _require_file(args.teacher, "teacher checkpoint")
    threads = _threads()
    overrides = {k: getattr(args, k) for k in ("loss", "sigma", "epochs", "lr", "seed") if getattr(args, k) is not None}
    if "sigma" in overrides:
        overrides["noise"] = overrides["sigma"] > 0
    try:
        section = cfg.mimicry.model_validate({**cfg.mimicry.model_dump(), **overrides})
    except ValidationError as exc:
        raise UsageError(f"invalid reconstruction options:\n{exc}") from None
    teacher = persistence.load_teacher(args.teacher)
    config = cfg.recast.build()
    teacher.check_topology(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(line):
        print(line, file=sys.stderr)

    model = RecastModel.initialize(config, section.seed)
    report = run_mimicry(teacher, model, section.build(), log=log, threads=threads)
    persistence.save_model(model, out / "model.rcst")
    _write_csv(out / "reconstruction.csv", ["layer", "module", "loss", "cosine_sim"],
               [(l, m, _fmt(loss), _fmt(cos)) for l, m, loss, cos in report.rows()])
    _write_csv(out / "loss_curve.csv", ["epoch", "total_loss"],
               [(e + 1, _fmt(v)) for e, v in enumerate(report.history)])
    failing = [(l, m, cos) for l, m, _, cos in report.rows() if cos < section.threshold]
    for l, m, cos in failing:
        print(f"layer={l} module={m} cosine_sim={cos:.6f} below threshold {section.threshold}", file=sys.stderr)
    return EXIT_THRESHOLD if failing else EXIT_OK


def cmd_diag(args) -> int:
    _require_file(args.model, "model checkpoint")
    model = persistence.load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = diagnose(model)
    _write_csv(out / "diagnostics_groups.csv", ["group", "layers", "avg_frobenius", "avg_entropy"],
               [(g, " ".join(map(str, rep.layers[g])), _fmt(rep.frobenius[g]), _fmt(rep.entropy[g]))
                for g in sorted(rep.frobenius)])
    for g, sim in sorted(rep.similarity.items()):
        if sim is None:
            continue
        layers = rep.layers[g]
        _write_csv(out / f"coefficient_similarity_g{g}.csv", ["layer"] + [str(l) for l in layers],
                   [[l] + [_fmt(v) for v in row] for l, row in zip(layers, sim)])
    return EXIT_OK


def cmd_til(args) -> int:
    cfg = _load_config(args.config)
    _require_file(args.model, "model checkpoint")
    mode = args.mode or cfg.til.mode
    budget = cfg.til.budget if args.budget is None else args.budget
    model = persistence.load_model(args.model)
    required = trainable_params(model, cfg.til.classes, mode)
    if required > budget:
        print(f"budget violation: mode {mode} needs {required} trainable parameters per task, "
              f"budget is {budget}", file=sys.stderr)
        return EXIT_BUDGET
    width = model.config.layout[0][0].dims[1]
    suite = cfg.til.suite(width)[1:]
    result = run_sequence(model, suite, ParamBudget(budget), mode, cfg.til.build())
    out = Path(args.out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    ids = [t.task_id for t in suite]
    _write_csv(out / "accuracy.csv", ["after_task"] + [f"task_{i}" for i in ids],
               [[ids[j]] + [_fmt(v) for v in row] for j, row in enumerate(result.accuracy)])
    for snap in result.snapshots:
        persistence.save_snapshot(snap, out / "snapshots" / f"task_{snap.task_id}.rcst")
    head = cfg.til.classes * feature_width(model) + cfg.til.classes
    summary = f"avg_top1={result.average!r} task_params={required - head}"
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    csvs = sorted(p for p in run_dir.rglob("*.csv") if p.is_file())
    if not csvs:
        raise UsageError(f"no result CSVs in {run_dir}; expected any of: {', '.join(EXPECTED_CSVS)}")
    out = Path(args.out)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# RECAST run report: {run_dir.name}", ""]
    for path in csvs:
        rel = path.relative_to(run_dir).as_posix()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = (rows[0], rows[1:]) if rows else ([], [])
        lines += [f"## {rel}", "", f"{len(body)} rows.", ""]
        if header:
            lines.append("| " + " | ".join(header) + " |")
            lines.append("|" + "---|" * len(header))
            lines += ["| " + " | ".join(r) + " |" for r in body]
        lines.append("")
        stem = rel[:-4].replace("/", "__")
        with open(data_dir / f"{stem}.dat", "w", encoding="utf-8") as fh:
            fh.write("# " + " ".join(header) + "\n")
            for r in body:
                fh.write(" ".join(v if v else "nan" for v in r) + "\n")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    return EXIT_OK


def cmd_combine(args) -> int:
    """Attach the configured adapter to every module and check the merged weights."""
    cfg = _load_config(args.config)
    _require_file(args.model, "model checkpoint")
    model = persistence.load_model(args.model)
    spec = cfg.adapter.build()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    rng = np.random.default_rng(cfg.adapter.seed)
    for l, m, mk in model.config.modules():
        W = model.weight(l, m)
        params = spec.init_params(W.shape, seed=cfg.adapter.seed + 7919 * l + m)
        init_change = float(np.max(np.abs(spec.apply(W, params).data - W.data)))
        if "B" in params:
            params["B"].data = rng.normal(0.0, 0.01, params["B"].shape)
        combined = spec.apply(W, params)
        dense = merge(combined)
        x = rng.standard_normal((4, W.shape[1]))
        merge_err = float(np.max(np.abs(x @ dense.T - x @ combined.data.T)))
        norm_ratio = float(np.linalg.norm(dense) / np.linalg.norm(W.data))
        rows.append((l, m, spec.kind, spec.n_params(W.shape), _fmt(init_change), _fmt(norm_ratio), _fmt(merge_err)))
    _write_csv(out / "combine.csv",
               ["layer", "module", "adapter", "adapter_params", "init_change", "norm_ratio", "merge_error"], rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train a plain teacher network on task 0")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("reconstruct", help="fit banks and coefficients to a teacher checkpoint")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss", choices=["smoothl1", "mse"])
    s.add_argument("--sigma", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("diag", help="template diversity, entropy and coefficient similarity")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diag)

    s = sub.add_parser("til", help="task-incremental run over the configured suite")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--mode", choices=["coefficients+head", "head-only", "full"])
    s.add_argument("--budget", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_til)

    s = sub.add_parser("report", help="consolidate result CSVs into markdown and plot data")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("combine", help="merge adapters into generated weights")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_combine)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"recast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExceededError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (FormatError, TopologyError, ShapeError) as exc:
        print(f"recast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
