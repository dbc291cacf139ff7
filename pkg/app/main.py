import argparse
import asyncio
import logging
import sys
import typing
from pathlib import Path

from pydantic.v1 import ValidationError

from app.services.bench import (
    A2AConfig,
    A2AMode,
    DlrmConfig,
    LoopMode,
    RunTarget,
    finish_a2a,
    finish_dlrm,
    launch_ranks,
    merge_a2a_parts,
    merge_dlrm_parts,
    run_a2a,
    run_dlrm,
    summarize_dlrm,
)
from app.services.collective import SafetyMode
from app.services.errors import BlsError, CommTimeoutError, ConfigError, HazardError, WorkloadError
from app.services.metrics import write_a2a_csv
from app.services.tcp import read_endpoints
from app.services.transport import Backend
from app.services.utils import parse_int_list
from app.services.verify import run_verify
from app.services.workloads import LAYOUTS, WorkloadKind
from app.settings import configure_logging

logger = logging.getLogger("bls")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_HAZARD = 3
EXIT_TIMEOUT = 4


def _names(text: str) -> typing.List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _add_target_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ranks", type=int, default=8, help="Communicator size")
    parser.add_argument(
        "--backend", choices=[b.value for b in Backend], default=Backend.IN_PROCESS.value
    )
    parser.add_argument("--endpoints", type=Path, default=None, help="File with one host:port per rank")
    parser.add_argument("--rank", type=int, default=None, help="Rank of this process (set by the tcp launcher)")
    parser.add_argument("--out", type=Path, default=Path("results"), help="Output directory")
    parser.add_argument("--seed", type=int, default=0)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description="Bounded lag synchronous alltoallv benchmarks",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    a2a = commands.add_parser("a2a", help="alltoallv microbenchmark sweeps")
    _add_target_args(a2a)
    a2a.add_argument("--mode", default="bls,ref", help="Comma list of bls, ref")
    a2a.add_argument("--bound", default="0", help="Comma list of bounds for bls")
    a2a.add_argument("--safety", choices=[s.value for s in SafetyMode], default=SafetyMode.ACKED.value)
    a2a.add_argument("--sizes", default="1,16,256,4K,32K,256K,1M", help="Bytes per rank (K/M suffixes)")
    a2a.add_argument("--iters", default="1,10,100,1000", help="Iteration counts")
    a2a.add_argument("--fixed-size", default="32K", help="Message size of the iteration sweep")
    a2a.add_argument("--fixed-iters", type=int, default=100, help="Iterations of the size sweep")

    dlrm = commands.add_parser("dlrm", help="DLRM inference experiments")
    _add_target_args(dlrm)
    dlrm.add_argument("--workload", choices=[w.value for w in WorkloadKind], default=WorkloadKind.BALANCED.value)
    dlrm.add_argument("--mode", default="bls", help="Comma list of sync, bls")
    dlrm.add_argument("--bound", default="0", help="Comma list of bounds")
    dlrm.add_argument("--safety", choices=[s.value for s in SafetyMode], default=SafetyMode.ACKED.value)
    dlrm.add_argument("--reference", action="store_true", help="Also run the synchronous reference")
    dlrm.add_argument("--batches", type=int, default=64)
    dlrm.add_argument("--batch-size", type=int, default=512)
    dlrm.add_argument("--emb-dim", type=int, default=64)
    dlrm.add_argument("--layout", choices=sorted(LAYOUTS), default="criteo")
    dlrm.add_argument("--tables", type=int, default=None, help="Override the layout's table count")
    dlrm.add_argument("--table-rows", default=None, help="Comma list of rows per table")
    dlrm.add_argument("--bottom-mlp", default="512,256", help="Hidden bottom MLP sizes")
    dlrm.add_argument("--top-mlp", default="512,256", help="Hidden top MLP sizes")
    dlrm.add_argument("--max-mult", type=int, default=100)
    dlrm.add_argument("--delay-max", type=float, default=0.01)
    dlrm.add_argument("--csv", type=Path, default=None, help="Dataset for the csv workload")
    dlrm.add_argument("--runs", type=int, default=5)

    verify = commands.add_parser("verify", help="Run the property suite")
    verify.add_argument("--ranks", type=int, default=4)
    verify.add_argument("--seeds", default="0,1,2")
    return parser


def _target(args: argparse.Namespace) -> RunTarget:
    endpoints = read_endpoints(args.endpoints) if args.endpoints else None
    return RunTarget(
        ranks=args.ranks,
        backend=Backend(args.backend),
        endpoints=endpoints,
        rank=args.rank,
        out=args.out,
    )


def _a2a_config(args: argparse.Namespace) -> A2AConfig:
    return A2AConfig(
        modes=[A2AMode(m) for m in _names(args.mode)],
        bounds=parse_int_list(args.bound),
        safety=SafetyMode(args.safety),
        sizes=parse_int_list(args.sizes),
        iters=parse_int_list(args.iters),
        fixed_size=parse_int_list(args.fixed_size)[0],
        fixed_iters=args.fixed_iters,
        seed=args.seed,
    )


def _dlrm_config(args: argparse.Namespace) -> DlrmConfig:
    return DlrmConfig(
        workload=WorkloadKind(args.workload),
        modes=[LoopMode(m) for m in _names(args.mode)],
        bounds=parse_int_list(args.bound),
        safety=SafetyMode(args.safety),
        reference=args.reference,
        batches=args.batches,
        batch_size=args.batch_size,
        emb_dim=args.emb_dim,
        layout=args.layout,
        tables=args.tables,
        table_rows=parse_int_list(args.table_rows) if args.table_rows else None,
        bottom_mlp=parse_int_list(args.bottom_mlp),
        top_mlp=parse_int_list(args.top_mlp),
        max_mult=args.max_mult,
        delay_max=args.delay_max,
        csv_path=args.csv,
        seed=args.seed,
        runs=args.runs,
    )


async def cmd_a2a(args: argparse.Namespace) -> int:
    target, config = _target(args), _a2a_config(args)
    points = await run_a2a(target, config)
    if target.is_child:
        write_a2a_csv(target.out / f"a2a.rank{target.rank}.csv", points)
    else:
        logger.info(f"wrote {finish_a2a(target, points)}")
    return EXIT_OK


async def cmd_dlrm(args: argparse.Namespace) -> int:
    target, config = _target(args), _dlrm_config(args)
    rows = await run_dlrm(target, config)
    if not target.is_child:
        logger.info(f"wrote {finish_dlrm(target, rows)}")
    return EXIT_OK


async def cmd_verify(args: argparse.Namespace) -> int:
    results = await run_verify(args.ranks, parse_int_list(args.seeds))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


COMMANDS = {"a2a": cmd_a2a, "dlrm": cmd_dlrm, "verify": cmd_verify}


def _launch(args: argparse.Namespace, argv: typing.Sequence[str]) -> int:
    """Parent of a tcp run: one child per rank, then merge their part files."""
    code = launch_ranks(argv, args.ranks)
    if code != EXIT_OK:
        return code
    target = _target(args)
    if args.command == "a2a":
        logger.info(f"wrote {finish_a2a(target, merge_a2a_parts(target))}")
    else:
        config = _dlrm_config(args)
        merge_dlrm_parts(target, config)
        logger.info(f"wrote {finish_dlrm(target, summarize_dlrm(target, config))}")
    return EXIT_OK


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_arg_parser().parse_args(argv)
    configure_logging()
    try:
        if args.command != "verify" and args.backend == Backend.TCP.value and args.rank is None:
            _target(args)
            return _launch(args, argv)
        return asyncio.run(COMMANDS[args.command](args))
    except (ValidationError, ConfigError, WorkloadError, ValueError) as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except HazardError as e:
        logger.error(f"protocol safety failure: {e}")
        return EXIT_HAZARD
    except (CommTimeoutError, asyncio.TimeoutError) as e:
        logger.error(f"timed out: {e}")
        return EXIT_TIMEOUT
    except BlsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
