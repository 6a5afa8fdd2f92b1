"""``selora`` command line: run, sweep, report and selftest.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_experiment, dump_config, parse_config, parse_config_dict
from .fisher import ORIENTATIONS
from .harness import NumericalError, RunReport, rank_report, train

log = logging.getLogger("selora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

RUN_FILES = ("effective_config.json", "run.json", "events.jsonl", "loss_curve.csv", "rank_trajectory.csv")
RANK_REPORT_HEADER = ["layer_id", "final_rank", "param_count", "share"]
SWEEP_HEADER = ["lambda", "total_final_rank", "final_eval_loss", "param_count", "seconds"]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_run_outputs(out: Path, report: RunReport) -> None:
    """Write everything but effective_config.json; run.json goes last and marks the run complete."""
    with open(out / "events.jsonl", "w") as f:
        for e in report.expansion_events:
            f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    _write_csv(out / "loss_curve.csv", ["step", "loss"], [(i + 1, repr(v)) for i, v in enumerate(report.loss_curve)])
    _write_csv(
        out / "rank_trajectory.csv",
        ["step", "layer_id", "rank"],
        [(step, lid, r) for step, ranks in report.rank_trajectory for lid, r in ranks.items()],
    )
    (out / "run.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")


def _prepare_out_dir(out: Path, force: bool) -> None:
    if (out / "run.json").exists() and not force:
        raise ConfigError(f"{out} already holds a completed run (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    for name in RUN_FILES + ("diagnostic.json", "rank_report.csv"):
        (out / name).unlink(missing_ok=True)


def execute_run(cfg: ExperimentConfig, out: Path, force: bool = False) -> RunReport:
    """One training run into ``out``. Raises ConfigError or NumericalError."""
    _prepare_out_dir(out, force)
    (out / "effective_config.json").write_text(dump_config(cfg))
    model, data = build_experiment(cfg)
    steps = cfg.train.total_steps

    def progress(step, loss):
        if step % max(1, steps // 10) == 0 or step == steps:
            log.info("step %d/%d loss %.6g ranks %d", step, steps, loss, sum(a.rank for a in model.adapters))

    try:
        report = train(model, data, cfg.train, on_step=progress)
    except NumericalError as exc:
        (out / "diagnostic.json").write_text(json.dumps(exc.diagnostic(), indent=1, sort_keys=True) + "\n")
        raise
    write_run_outputs(out, report)
    return report


def _sweep_one(args):
    cfg, out, force = args
    report = execute_run(cfg, out, force)
    return report.total_final_rank, report.final_eval_loss, report.final_param_count, report.wall_time_seconds


def _lambda_dir(lam: float) -> str:
    return f"lambda_{lam!r}"


def execute_sweep(cfg: ExperimentConfig, out: Path, force: bool = False, jobs: int = 1) -> list[list]:
    if not cfg.lambdas:
        raise ConfigError("sweep.lambdas: the sweep needs a non-empty lambda list")
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for lam in cfg.lambdas:
        policy = replace(cfg.train.policy, lambda_threshold=lam)
        run_cfg = replace(cfg, train=replace(cfg.train, policy=policy), lambdas=None)
        tasks.append((run_cfg, out / _lambda_dir(lam), force))
    # refuse before any work starts
    for _, d, _ in tasks:
        if (d / "run.json").exists() and not force:
            raise ConfigError(f"{d} already holds a completed run (use --force to overwrite)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = [
        [repr(lam), total, repr(loss), count, f"{secs:.3f}"]
        for lam, (total, loss, count, secs) in zip(cfg.lambdas, results)
    ]
    _write_csv(out / "sweep_summary.csv", SWEEP_HEADER, rows)
    return rows


def load_report(run_dir: Path) -> RunReport:
    path = run_dir / "run.json"
    if not path.is_file():
        raise ConfigError(f"{run_dir} is not a completed run directory (no run.json)")
    try:
        return RunReport.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: unreadable run report ({exc})") from None


def format_report(report: RunReport) -> str:
    rows = rank_report(report)
    width = max([len("layer_id")] + [len(r.layer_id) for r in rows])
    lines = [f"{'layer_id':<{width}}  final_rank  param_count   share"]
    for r in rows:
        lines.append(f"{r.layer_id:<{width}}  {r.final_rank:>10}  {r.param_count:>11}  {r.share:6.3f}")
    lines.append(f"total rank {report.total_final_rank}, trainable parameters {report.final_param_count}")
    if report.eval_losses:
        lines.append(f"final eval loss {report.final_eval_loss:.6g}")
    events = report.expansion_events
    if not events:
        lines.append("no expansions")
    else:
        lines.append(f"{len(events)} expansions; top {min(5, len(events))} by fi_ratio:")
        top = sorted(events, key=lambda e: (-e.fi_ratio, e.step, e.layer_id))[:5]
        for e in top:
            lines.append(f"  step {e.step:>6}  {e.layer_id:<{width}}  {e.old_rank} -> {e.new_rank}  ratio {e.fi_ratio:.4f}")
    return "\n".join(lines)


def execute_report(run_dir: Path) -> str:
    report = load_report(run_dir)
    rows = rank_report(report)
    _write_csv(
        run_dir / "rank_report.csv",
        RANK_REPORT_HEADER,
        [(r.layer_id, r.final_rank, r.param_count, repr(r.share)) for r in rows],
    )
    return format_report(report)


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _selftest_checks():
    from .adapter import SeLoRALinear
    from .autodiff import Parameter, Tape, grad, matmul, mse_loss, tanh
    from .rng import SeededRng

    rng = SeededRng(7)

    def expansion_noop():
        a = SeLoRALinear("t", rng.normal((6, 5)), rng.normal((1, 5)), rng=rng.child("a"), rank=2)
        a.B.value[:] = rng.normal((2, 5))
        x = rng.normal((4, 6))
        before = a(x).value
        a.expand(rng.child("k"))
        return float(np.max(np.abs(a(x).value - before))) <= 1e-12

    def gradient_check():
        w = Parameter("w", rng.normal((3, 2)))
        x, y = rng.normal((4, 3)), rng.normal((4, 2))

        def f():
            return mse_loss(tanh(matmul(x, w)), y)

        with Tape():
            (g,) = grad(f(), [w])
        h, worst = 1e-5, 0.0
        for idx in np.ndindex(w.shape):
            old = w.value[idx]
            w.value[idx] = old + h
            up = f().item()
            w.value[idx] = old - h
            down = f().item()
            w.value[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), 1e-8))
        return worst < 1e-4

    def nonfinite_abort():
        doc = {
            "task": {"kind": "linear_teacher", "layer_dims": [[4, 4]], "true_ranks": [1], "n_samples": 20},
            "train": {"total_steps": 5, "batch_size": 4, "inject_nonfinite_at_step": 3},
        }
        with tempfile.TemporaryDirectory() as tmp:
            cfg = parse_config_dict(doc)
            try:
                execute_run(cfg, Path(tmp) / "run")
            except NumericalError:
                return (Path(tmp) / "run" / "diagnostic.json").is_file()
        return False

    return [("expansion preserves output", expansion_noop), ("gradient vs finite differences", gradient_check),
            ("non-finite loss aborts with diagnostic", nonfinite_abort)]


def run_selftest() -> bool:
    ok = True
    for name, check in _selftest_checks():
        passed = bool(check())
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    quiet = argparse.ArgumentParser(add_help=False)
    quiet.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines on stderr")
    parser = argparse.ArgumentParser(prog="selora", description="Self-expanding low-rank adapter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override task and training seeds")
        p.add_argument("--ratio-orientation", choices=ORIENTATIONS, default=None)
        p.add_argument("--force", action="store_true", help="overwrite a completed run directory")

    common(sub.add_parser("run", parents=[quiet], help="one training run"))
    sweep = sub.add_parser("sweep", parents=[quiet], help="one run per lambda in sweep.lambdas")
    common(sweep)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    report = sub.add_parser("report", parents=[quiet], help="summarise a completed run directory")
    report.add_argument("run_dir", type=Path)
    sub.add_parser("selftest", parents=[quiet], help="quick internal consistency checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    try:
        if args.command == "selftest":
            return EXIT_OK if run_selftest() else EXIT_CONFIG
        if args.command == "report":
            print(execute_report(args.run_dir))
            return EXIT_OK
        cfg = parse_config(args.config).with_overrides(args.seed, args.ratio_orientation)
        if args.command == "run":
            report = execute_run(cfg, args.out, args.force)
            log.info("done: total rank %d, final eval loss %.6g", report.total_final_rank, report.final_eval_loss)
        else:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            execute_sweep(cfg, args.out, args.force, args.jobs)
            log.info("sweep done: %s", args.out / "sweep_summary.csv")
        return EXIT_OK
    except ConfigError as exc:
        print(f"selora: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"selora: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
