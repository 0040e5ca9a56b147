"""Command-line front end.

Subcommands:

* ``run`` — execute a simulation scenario file and emit the JSON report;
* ``dump-dag`` — render a block directory as Graphviz DOT;
* ``state`` — materialize and print the state held in a block directory.

Exit codes: 0 success/converged, 1 domain failure (non-convergence or
corrupt data), 2 usage or I/O error.  Results go to stdout, diagnostics
to stderr.

Scenario files are flat ``key = value`` lines; ``#`` starts a comment.
Unknown keys are rejected.  The ``partition_schedule`` value lists
windows separated by ``;``, each ``start-end:ids|ids|...`` with replica
ids comma-separated, e.g. ``0-400:0,1|2,3,4``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .blocks import DirectoryBlockStore, iter_blocks, verify_block
from .clock import ClockDag
from .payloads import materialize
from .sim import PartitionWindow, SimConfig, Simulator

_SCENARIO_FIELDS = {
    "replica_count": int,
    "seed": int,
    "drop_rate": float,
    "dup_rate": float,
    "corrupt_rate": float,
    "reorder_jitter": int,
    "ops_per_replica": int,
    "key_space": int,
    "batch_threshold": int,
    "shortcut_interval": int,
    "final_sync_rounds": int,
    "fetch_concurrency": int,
    "max_fetch_retries": int,
    "inline_broadcast": bool,
}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_partitions(text: str) -> tuple[PartitionWindow, ...]:
    windows = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        span, _, groups_text = chunk.partition(":")
        start_text, _, end_text = span.partition("-")
        groups = tuple(
            tuple(int(x) for x in grp.split(",") if x.strip())
            for grp in groups_text.split("|")
            if grp.strip()
        )
        windows.append(PartitionWindow(start=int(start_text), end=int(end_text), groups=groups))
    return tuple(windows)


def parse_scenario(text: str) -> SimConfig:
    """Parse a flat key=value scenario document into a SimConfig."""
    values: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value")
        if key == "partition_schedule":
            values[key] = _parse_partitions(value)
        elif key in _SCENARIO_FIELDS:
            caster = _SCENARIO_FIELDS[key]
            try:
                values[key] = _parse_bool(value) if caster is bool else caster(value)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return SimConfig(**values)


def _load_verified_dag(blockdir: str) -> ClockDag:
    """Open a block directory, verifying every file against its name.

    Raises ValueError listing every bad block if any fails verification.
    """
    store = DirectoryBlockStore(blockdir)
    bad = [cid.hex() for cid, data in iter_blocks(store) if not verify_block(cid, data)]
    if bad:
        raise ValueError("corrupt blocks: " + " ".join(bad))
    return ClockDag(store)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        text = Path(args.scenario).read_text()
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return 2
    try:
        config = parse_scenario(text)
        if args.seed is not None:
            config.seed = args.seed
        config.validate()
    except ValueError as exc:
        print(f"error: bad scenario: {exc}", file=sys.stderr)
        return 2
    report = Simulator(config).run()
    text_out = report.to_json()
    sys.stdout.write(text_out)
    if args.json:
        try:
            Path(args.json).write_text(text_out)
        except OSError as exc:
            print(f"error: cannot write report: {exc}", file=sys.stderr)
            return 2
    return 0 if report.converged else 1


def _cmd_dump_dag(args: argparse.Namespace) -> int:
    if not Path(args.blockdir).is_dir():
        print(f"error: not a directory: {args.blockdir}", file=sys.stderr)
        return 2
    try:
        dag = _load_verified_dag(args.blockdir)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    dot = dag.dump_dot()
    if args.out:
        try:
            Path(args.out).write_text(dot)
        except OSError as exc:
            print(f"error: cannot write dot file: {exc}", file=sys.stderr)
            return 2
    else:
        sys.stdout.write(dot)
    return 0


def _cmd_state(args: argparse.Namespace) -> int:
    if not Path(args.blockdir).is_dir():
        print(f"error: not a directory: {args.blockdir}", file=sys.stderr)
        return 2
    try:
        dag = _load_verified_dag(args.blockdir)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(materialize(dag).dump())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagcrdt",
        description="Replicated CRDT store on a content-addressed DAG clock: "
        "simulator and block-store tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser(
        "run",
        help="run a simulation scenario and print its JSON report",
        description="Scenario defaults: "
        + ", ".join(f"{k}={getattr(SimConfig(), k)!r}" for k in _SCENARIO_FIELDS)
        + ", partition_schedule=()",
    )
    p_run.add_argument("scenario", help="path to a key=value scenario file")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--json", metavar="PATH", help="also write the report to PATH")
    p_run.set_defaults(func=_cmd_run)

    p_dot = sub.add_parser("dump-dag", help="render a block directory as Graphviz DOT")
    p_dot.add_argument("blockdir", help="directory of block files named by hex CID")
    p_dot.add_argument("--out", metavar="PATH", help="write DOT here instead of stdout")
    p_dot.set_defaults(func=_cmd_dump_dag)

    p_state = sub.add_parser("state", help="print the materialized state of a block directory")
    p_state.add_argument("blockdir", help="directory of block files named by hex CID")
    p_state.set_defaults(func=_cmd_state)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
