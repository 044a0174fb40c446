"""Command-line entry point: ``structprompt <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointFormatError
from .tasks import TASK_KINDS, ConfigError, make_task, save_task

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 2, 3, 4


def _load(args):
    from .experiments import load_experiment
    exp = load_experiment(args.config)
    if getattr(args, "seed", None) is not None:
        exp.seeds = [args.seed]
    return exp


def cmd_tasks_generate(args) -> int:
    kinds = args.kinds or list(TASK_KINDS)
    for kind in kinds:
        _, ds = make_task(kind, args.seed, args.train_size, args.dev_size, args.test_size)
        path = save_task(ds, args.out)
        print(f"{kind}: {len(ds.train)}/{len(ds.dev)}/{len(ds.test)} -> {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiments import execute_run, prepare_lm
    exp = _load(args)
    seed = exp.seeds[0]
    status = EXIT_OK
    lm_path = prepare_lm(exp, Path(args.out))
    for spec in exp.run_specs():
        if spec.seed != seed:
            continue
        rec = execute_run(exp, spec, Path(args.out), resume=args.resume, lm_path=lm_path)
        scores = ", ".join(f"{t}={v:.4f}" for t, v in rec.test.items())
        print(f"{spec.run_id}: {rec.status} best_dev={rec.best_dev} test[{scores}]")
        if rec.status != "ok":
            status = EXIT_PARTIAL
    return status


def cmd_matrix(args) -> int:
    from .experiments import run_matrix, write_report
    exp = _load(args)
    res = run_matrix(exp, args.out, jobs=args.jobs, resume=args.resume)
    write_report(args.out, res.records.values())
    print(res.table.to_markdown())
    print(f"new runs: {res.new_runs}")
    if res.failed:
        print("failed: " + ", ".join(res.failed), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_lr_sweep(args) -> int:
    from .experiments import lr_sensitivity, write_report
    exp = _load(args)
    rep = lr_sensitivity(exp, args.out, jobs=args.jobs, resume=args.resume)
    write_report(args.out, rep.matrix.records.values())
    print(rep.to_markdown())
    if rep.matrix.failed:
        print("failed: " + ", ".join(rep.matrix.failed), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiments import load_records, write_report
    records = load_records(args.out)
    if not records:
        print(f"no run records under {args.out}", file=sys.stderr)
        return EXIT_IO
    md, csv_path = write_report(args.out, records)
    print(md.read_text())
    return EXIT_OK


def cmd_verify_gradients(args) -> int:
    from .verify import run_suite
    results, seconds = run_suite(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} shape={r.shape}  rel_err={r.error:.2e}")
    bad = sum(not r.passed for r in results)
    print(f"{len(results) - bad}/{len(results)} checks passed in {seconds:.1f}s")
    return EXIT_OK if not bad else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structprompt", description="Structured prompt tuning on a toy seq2seq LM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    tasks = sub.add_parser("tasks", help="synthetic task datasets")
    tsub = tasks.add_subparsers(dest="tasks_command", required=True)
    gen = tsub.add_parser("generate", help="write datasets as TSV files")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--kinds", nargs="+", choices=TASK_KINDS)
    gen.add_argument("--train-size", type=int, default=2000)
    gen.add_argument("--dev-size", type=int, default=200)
    gen.add_argument("--test-size", type=int, default=200)
    gen.set_defaults(func=cmd_tasks_generate)

    def experiment(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None, help="restrict to this seed")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--resume", action="store_true", help="continue interrupted runs from their checkpoints")
        sp.set_defaults(func=func)

    experiment("run", cmd_run, "train every cell of a config for one seed")
    experiment("matrix", cmd_matrix, "generator x task x seed comparison table")
    experiment("lr-sweep", cmd_lr_sweep, "learning-rate sensitivity sweep (direct vs lowrank)")

    rp = sub.add_parser("report", help="rebuild report.md / metrics.csv from run records")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    vg = sub.add_parser("verify-gradients", help="finite-difference gradient checks")
    vg.add_argument("--seed", type=int, default=0)
    vg.set_defaults(func=cmd_verify_gradients)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
