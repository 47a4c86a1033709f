"""Command-line entry point.

Exit status: 0 on success, 1 for user errors (bad config or flags, missing
prerequisites, a locked or mismatched run directory, runs that cannot be
reported together), 2 for internal failures.
The default output root is ``$CONTEXT_FORCING_OUT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import pipeline

OUT_ENV = "CONTEXT_FORCING_OUT"
COMMANDS = ("teacher-pretrain", "teacher-erft", "stage1", "stage2", "eval", "ablate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class RunLock:
    """Exclusive ownership of a run directory via an ``O_EXCL`` lock file."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / "run.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path.parent} is locked by another run ({self.path} exists); "
                             f"remove the lock file if that run is dead") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="context-forcing", description="Long-context causal distillation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("preset", nargs="?", help="ablation preset (ablate only): " + ", ".join(cfgmod.PRESETS))
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    p.add_argument("--out", help="run directory (report: root containing run directories)")
    return p


def resolve_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig.default()
    overrides = list(args.overrides)
    if args.command == "ablate":
        overrides = list(cfgmod.PRESETS[args.preset]) + overrides
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise cfgmod.ConfigError("--seed must be an unsigned 64-bit integer")
        overrides.append(f"run.seed={args.seed}")
    return cfg.with_overrides(overrides)


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "ablate":
        if args.preset not in cfgmod.PRESETS:
            raise UsageError(f"ablate needs a preset, one of: {', '.join(cfgmod.PRESETS)}")
    elif args.preset is not None:
        raise UsageError(f"unexpected argument {args.preset!r}")

    if args.command == "report":
        root = Path(args.out) if args.out else _out_root()
        table = pipeline.report(root)
        (root / "report.md").write_text(table, encoding="utf-8")
        sys.stdout.write(table)
        return 0

    cfg = resolve_config(args)
    default_name = args.preset if args.command == "ablate" else "default"
    out = Path(args.out) if args.out else _out_root() / default_name
    with RunLock(out):
        rd = pipeline.RunDir(out, cfg)
        rd.prepare()
        if args.command == "teacher-pretrain":
            pipeline.teacher_pretrain(rd)
        elif args.command == "teacher-erft":
            pipeline.teacher_erft(rd)
        elif args.command == "stage1":
            pipeline.stage1(rd)
        elif args.command == "stage2":
            if not cfg["stage2.enabled"]:
                raise UsageError("stage2.enabled is false in this config")
            pipeline.stage2(rd)
        elif args.command == "eval":
            pipeline.evaluate(rd)
        else:
            pipeline.full_pipeline(rd, args.preset)
        rd.record_config()
    print(f"{args.command}: wrote {out}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (UsageError, cfgmod.ConfigError, pipeline.MissingPrerequisite, pipeline.CheckpointMismatch,
            pipeline.InconsistentRuns) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
