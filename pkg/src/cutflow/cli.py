"""Command line interface: ``run``, ``converge`` and ``validate``."""

from __future__ import annotations

import argparse
import os
import sys
import time

from .errors import CutFlowError, StepFailure
from .problems import EXAMPLES, LevelPlan, convergence_study, get_example, run_level


def level_range(text: str) -> list[int]:
    """Parse ``a..b`` (inclusive) or a single level ``a``."""
    try:
        if ".." in text:
            a, b = (int(s) for s in text.split("..", 1))
        else:
            a = b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"empty or negative level range {text!r}")
    return list(range(a, b + 1))


def _nonnegative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    config_help = "key = value file overriding LevelPlan fields"
    parser = argparse.ArgumentParser(prog="cutflow", description="Shape gradient flows with cut finite elements.")
    parser.add_argument("--config", metavar="FILE", help=config_help)
    # on a subcommand the option only overrides when given, so a global --config survives
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS, help=config_help)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run the flow of one example at one level")
    run.add_argument("--example", type=int, choices=sorted(EXAMPLES), required=True)
    run.add_argument("--level", type=_nonnegative, required=True)
    run.add_argument("--out", default=None, help="output directory (default: run_example<E>_level<L>)")
    run.add_argument("--steps", type=_nonnegative, default=None, help="override the number of steps")
    run.add_argument("--snapshot-every", type=_nonnegative, default=None,
                     help="boundary snapshot interval in steps (default: about 10 per run)")

    conv = sub.add_parser("converge", parents=[common], help="convergence table over refinement levels")
    conv.add_argument("--example", type=int, choices=sorted(EXAMPLES), required=True)
    conv.add_argument("--levels", type=level_range, required=True, metavar="A..B")
    conv.add_argument("--reference", type=_nonnegative, default=None,
                      help="reference level for u, p, w (default: the finest studied level)")
    conv.add_argument("--out", default=".", help="directory for orders.csv")
    conv.add_argument("--cache", default=None, help="directory of cached level results")
    conv.add_argument("--phi-reference", choices=("circle", "reference"), default="circle",
                      help="shape the geometric error is measured against (default: the unit circle)")

    val = sub.add_parser("validate", parents=[common], help="run the oracle suites")
    val.add_argument("--quick", action="store_true", help="skip the manufactured-rate suites")
    return parser


def _plan(args, parser) -> LevelPlan:
    if not args.config:
        return LevelPlan()
    try:
        return LevelPlan.from_file(args.config)
    except (OSError, ValueError) as err:
        parser.error(f"--config: {err}")


def _progress(every: int):
    start = time.time()

    def report(state, trace):
        if state.step % every == 0:
            print(f"step {state.step:7d}  t={state.time:9.4f}  J={state.J_value:.6e}  "
                  f"dofs={state.fields.dofmap.n_dofs}  elapsed={time.time() - start:.1f}s", flush=True)

    return report


def _cmd_run(args, plan: LevelPlan) -> int:
    out = args.out or f"run_example{args.example}_level{args.level}"
    os.makedirs(out, exist_ok=True)
    n_steps = plan.n_steps(args.level) if args.steps is None else args.steps
    every = args.snapshot_every if args.snapshot_every is not None else max(1, n_steps // 10)
    plan = LevelPlan.from_text(f"snapshot_every = {every}", plan)
    with open(os.path.join(out, "plan.cfg"), "w") as fh:
        fh.write(plan.to_text())
    try:
        trace = run_level(get_example(args.example), args.level, plan, out_dir=out,
                          progress=_progress(max(1, n_steps // 20)), n_steps=n_steps)
    except StepFailure as err:
        if err.trace is not None:
            err.trace.write_csv(os.path.join(out, "trace.csv"))
        print(f"error: solver failure at {err}", file=sys.stderr)
        return 1
    trace.write_csv(os.path.join(out, "trace.csv"))
    print(f"final J = {trace.J[-1]:.6e}; wrote {out}")
    return 0


def _cmd_converge(args, plan: LevelPlan, parser) -> int:
    if args.reference is not None and args.reference < max(args.levels):
        parser.error("--reference must not be coarser than the studied levels")
    os.makedirs(args.out, exist_ok=True)
    table = convergence_study(get_example(args.example), args.levels, args.reference, plan,
                              cache_dir=args.cache, progress=_progress(1000), phi_reference=args.phi_reference)
    path = os.path.join(args.out, "orders.csv")
    table.to_csv(path)
    print(table.format())
    print(f"wrote {path}")
    for level, message in sorted(table.failures.items()):
        print(f"error: level {level}: {message}", file=sys.stderr)
    return 1 if table.failures else 0


def _cmd_validate(args) -> int:
    from .validation import default_suite

    reports = default_suite(quick=args.quick)
    for report in reports:
        print(report.line())
    return 0 if all(r.passed for r in reports) else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        plan = _plan(args, parser) if args.command != "validate" else None
        if args.command == "run":
            return _cmd_run(args, plan)
        if args.command == "converge":
            return _cmd_converge(args, plan, parser)
        return _cmd_validate(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except CutFlowError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
