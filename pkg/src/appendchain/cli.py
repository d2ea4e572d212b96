"""Command-line entry point: run scenarios, compare consensus, verify journals."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional

from .consensus import Algorithm
from .journal import JournalError, verify_journal
from .scenario import (
    SCENARIO_GRID,
    ComparisonResult,
    ScenarioConfig,
    ScenarioError,
    compare_consensus,
    emit_report,
    run_scenario,
)

logger = logging.getLogger(__name__)

#: runs bigger than this need --full, keeping accidental hour-long runs at bay
LARGE_RUN_TX = 200_000


def _algorithm(name: str) -> Algorithm:
    try:
        return {"witness": Algorithm.WITNESS, "pbft": Algorithm.PBFT}[name]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown consensus {name!r} (choose witness or pbft)"
        ) from None


def _add_scenario_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--scenario",
        default="custom",
        help=f"named scenario ({', '.join(SCENARIO_GRID)}) or 'custom'",
    )
    parser.add_argument("--gateways", type=int, default=4)
    parser.add_argument("--devices-per-gw", type=int, default=10)
    parser.add_argument("--tx-per-device", type=int, default=100)
    parser.add_argument("--witness-min", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--net", choices=("inmem", "socket"), default="inmem",
        help="transport: deterministic in-memory simulation or localhost TCP",
    )
    parser.add_argument("--ttl-ms", type=int, default=None,
                        help="block lifetime; low values force key rotations")
    parser.add_argument("--timeout-ms", type=int, default=500)
    parser.add_argument("--duration-ms", type=int, default=None,
                        help="override the derived virtual run length")
    parser.add_argument("--journal-dir", default=None,
                        help="write one append-only journal per gateway here")
    parser.add_argument(
        "--full", action="store_true",
        help=f"allow runs above {LARGE_RUN_TX:,} total transactions",
    )
    parser.add_argument("--out", default=None, help="report path (default stdout)")
    parser.add_argument("--format", choices=("csv", "json", "table"),
                        default="table")


def _build_config(args: argparse.Namespace, algorithm: Algorithm) -> ScenarioConfig:
    kwargs = {
        "witness_minimum": args.witness_min,
        "seed": args.seed,
        "timeout_ms": args.timeout_ms,
    }
    if args.ttl_ms is not None:
        kwargs["ttl_ms"] = args.ttl_ms
    if args.duration_ms is not None:
        kwargs["duration_ms"] = args.duration_ms
    if args.scenario != "custom":
        cfg = ScenarioConfig.preset(args.scenario, algorithm, **kwargs)
    else:
        cfg = ScenarioConfig(
            label="custom",
            algorithm=algorithm,
            gateways=args.gateways,
            devices_per_gateway=args.devices_per_gw,
            tx_per_device=args.tx_per_device,
            **kwargs,
        )
    if cfg.expected_tx > LARGE_RUN_TX and not args.full:
        raise SystemExit(
            f"{cfg.label}: {cfg.expected_tx:,} transactions exceeds the "
            f"default budget; pass --full to run it anyway"
        )
    return cfg


def _emit(args: argparse.Namespace, reports: list) -> None:
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            emit_report(reports, args.format, fh)
        print(f"report written to {args.out}", file=sys.stderr)
    else:
        emit_report(reports, args.format, sys.stdout)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_config(args, _algorithm(args.consensus))
    try:
        result = run_scenario(
            cfg, journal_dir=args.journal_dir, transport=args.net
        )
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    _emit(args, [result.report])
    print(
        f"{cfg.label}/{cfg.algorithm}: {result.report.total_blocks} blocks, "
        f"{result.report.total_tx} transactions, "
        f"virtual {result.elapsed_virtual_us / 1e6:.2f}s, "
        f"wall {result.elapsed_wall_s:.2f}s",
        file=sys.stderr,
    )
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    cfg = _build_config(args, Algorithm.WITNESS)
    try:
        comparison: ComparisonResult = compare_consensus(
            cfg, journal_dir=args.journal_dir, transport=args.net
        )
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    _emit(args, [comparison.witness.report, comparison.pbft.report])
    ratio = comparison.ratios.get("block_consensus_ms")
    if ratio is not None:
        print(
            f"block consensus median ratio (pbft/witness): {ratio:.2f}",
            file=sys.stderr,
        )
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    try:
        chain, violation = verify_journal(args.journal)
    except (JournalError, OSError) as exc:
        print(f"journal unreadable: {exc}", file=sys.stderr)
        return 1
    total_tx = sum(len(block.ledger) for block in chain.blocks)
    if violation is not None:
        print(
            f"INVALID: block {violation.block_index}, "
            f"entry {violation.tx_index}: {violation.reason}",
            file=sys.stderr,
        )
        return 1
    print(
        f"ok: {len(chain)} blocks, {total_tx} transactions, "
        f"digest {chain.chain_digest().hex()}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="appendchain",
        description=(
            "Appendable-block blockchain for gateway IoT networks: "
            "benchmark scenarios, consensus comparison, journal verification."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run one scenario")
    _add_scenario_args(run_parser)
    run_parser.add_argument(
        "--consensus", default="witness",
        help="consensus algorithm: witness or pbft",
    )
    run_parser.set_defaults(handler=_cmd_run)

    compare_parser = sub.add_parser(
        "compare", help="run the same workload under both algorithms"
    )
    _add_scenario_args(compare_parser)
    compare_parser.set_defaults(handler=_cmd_compare)

    verify_parser = sub.add_parser(
        "verify", help="replay and re-validate a gateway journal"
    )
    verify_parser.add_argument("--journal", required=True)
    verify_parser.set_defaults(handler=_cmd_verify)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.handler(args)
    except ValueError as exc:
        # bad label, out-of-range topology, "witness" typo'd, ...
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
