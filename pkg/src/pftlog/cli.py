"""Command-line entry points.

Exit codes: 0 success, 1 verification or invariant failure, 2 usage error,
3 runtime error. ``--json`` switches every subcommand to one JSON record per
line on stdout.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import yaml

from . import kv
from .config import ConfigError, ConfigRejected, PftParameters, manifest, plan_deployment

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class Output:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def record(self, rec: dict, text: str | None = None) -> None:
        if self.as_json:
            print(json.dumps(rec, sort_keys=True, default=str), file=self.stream)
        else:
            print(text if text is not None else _pretty(rec), file=self.stream)
        self.stream.flush()


def _pretty(rec: dict) -> str:
    return "  ".join(f"{k}={v}" for k, v in rec.items())


def _error(out: Output, code: int, message: str) -> int:
    if out.as_json:
        out.record({"error": message, "exit": code})
    else:
        print(f"error: {message}", file=sys.stderr)
    return code


def _sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"platform sizes must be comma-separated integers: {text!r}")
    if not sizes:
        raise argparse.ArgumentTypeError("at least one platform size is required")
    return sizes


def _assignment(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, yaml.safe_load(value)


# plan


def cmd_plan(args, out: Output) -> int:
    sizes = args.platform_sizes or tuple(plan_deployment(args.c, args.pi_safe, args.pi_live))
    try:
        params = PftParameters(sizes, args.pi_safe, args.pi_live, args.c)
        plan = manifest(params)
    except ConfigRejected as exc:
        if out.as_json:
            out.record({"ok": False, "n": exc.n, "required": exc.required, "deficit": exc.deficit})
        else:
            print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ConfigError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    plan["n"] = params.n
    plan["ok"] = True
    if out.as_json:
        out.record(plan)
    else:
        prof = plan["profile"]
        print(f"nodes: {params.n} (minimum {plan['min_nodes']}) on {len(sizes)} platforms "
              f"{list(sizes)} (minimum {plan['min_platforms']})")
        print(f"faults: u={prof['u']} f_safe={prof['f_safe']} f_live={prof['f_live']}")
        print(f"quorums: commit={prof['commit_quorum']} audit={prof['audit_quorum']} "
              f"fast={prof['fast_quorum']} fast_path={'on' if prof['fast_path_enabled'] else 'off'}")
    if args.init_cluster:
        from .net.cluster import init_local_cluster

        cluster = init_local_cluster(args.init_cluster, params, base_port=args.base_port, host=args.host,
                                     signing_interval=args.signing_interval,
                                     view_timeout_ms=args.view_timeout_ms, lag_window=args.lag_window)
        path = Path(args.init_cluster) / "cluster.yaml"
        out.record({"cluster": str(path), "replicas": [r.address for r in cluster.replicas]},
                   f"wrote {path}")
    return EXIT_OK


# sim


def _run_one(path: str, overrides: dict, seed: int | None, out_dir: str | None) -> dict:
    from .sim.harness import run_scenario
    from .sim.metrics import measure
    from .sim.scenario_file import load_scenario

    config, flt = load_scenario(path, overrides)
    if seed is not None:
        config = replace(config, seed=seed)
    result = run_scenario(config, flt)
    report = result.report
    final = [r.node_state().to_dict() for r in result.replicas]
    summary = {
        "scenario": config.name,
        "seed": config.seed,
        "passed": report.passed,
        "violated": report.violated(),
        "events": len(result.trace.events),
        "messages": sum(result.trace.census.values()),
        "metrics": measure(result.trace).summary(),
        "final": final,
    }
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "trace.jsonl").write_text("\n".join(result.trace.lines()) + "\n")
        (d / "report.json").write_text(json.dumps(
            {**summary, "invariants": report.rows(), "census": dict(result.trace.census)},
            indent=2, sort_keys=True, default=str))
    summary["rows"] = report.rows()
    return summary


def cmd_sim(args, out: Output) -> int:
    from .sim.harness import ScenarioError
    from .sim.scenario_file import load_scenario

    overrides = dict(args.set or [])
    try:
        config, _ = load_scenario(args.scenario, overrides)
    except ScenarioError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    base = args.seed if args.seed is not None else config.seed
    seeds = [base + i for i in range(args.seeds)] if args.seeds > 1 else [args.seed]

    def out_for(seed):
        if args.out is None:
            return None
        return str(Path(args.out) / f"seed-{seed}") if args.seeds > 1 else args.out

    jobs = [(args.scenario, overrides, seed, out_for(seed)) for seed in seeds]
    try:
        if args.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(args.workers) as pool:
                results = list(pool.map(_run_one, *zip(*jobs)))
        else:
            results = [_run_one(*job) for job in jobs]
    except ScenarioError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    for res in results:
        rows = res.pop("rows")
        if not args.verbose:
            del res["final"]
        if out.as_json:
            out.record(res)
            continue
        verdict = "PASS" if res["passed"] else "FAIL"
        print(f"{res['scenario']} seed={res['seed']}: {verdict} ({res['events']} events, "
              f"{res['messages']} messages)")
        for row in rows:
            if row["checked"]:
                extra = f"  first: {row['first']}" if row["status"] == "FAIL" else ""
                print(f"  {row['status']:4} {row['invariant']}{extra}")
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_FAIL


# run / client / status / verify-receipt


def _cluster(path: str):
    from .net.cluster import load_cluster

    return load_cluster(path)


def cmd_run(args, out: Output) -> int:
    from .net.cluster import parse_address
    from .net.node import FatalError, replica_main
    from .net.storage import CorruptLog

    logging.basicConfig(level=getattr(logging, args.log_level.upper()), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cluster = _cluster(args.cluster)
        listen = parse_address(args.listen) if args.listen else None
        replica_main(cluster, args.id, args.data_dir, listen)
    except ConfigError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    except (FatalError, CorruptLog, OSError) as exc:
        return _error(out, EXIT_RUNTIME, f"fatal: {exc}")
    return EXIT_OK


def _receipt_record(txn: bytes, receipt) -> dict:
    rec = {"txn": txn.hex(), "kind": type(receipt).__name__, "batch_seq": receipt.batch_seq,
           "batch_view": receipt.batch_view, "signer": receipt.signature.signer}
    if hasattr(receipt, "qcs"):
        rec["qcs"] = len(receipt.qcs)
        rec["path"] = "fast" if receipt.fast else "slow"
    return rec


def _client_txns(args) -> list[bytes]:
    if args.txn is not None:
        return [args.txn.encode()]
    if args.put is not None:
        key, value = args.put
        return [kv.put(args.client_id, args.client_seq, key.encode(), value.encode())]
    return [kv.put(args.client_id, args.client_seq + i, b"key-%d" % i, b"value-%d" % i)
            for i in range(args.count)]


async def _submit_all(cluster, txns, mode, timeout, concurrency):
    from .net.client import submit_async

    sem = asyncio.Semaphore(concurrency)

    async def one(i, txn):
        async with sem:
            return await submit_async(cluster, txn, mode, timeout, first=i)

    return await asyncio.gather(*(one(i, t) for i, t in enumerate(txns)), return_exceptions=True)


def cmd_client(args, out: Output) -> int:
    from .net.client import SubmitTimeout

    try:
        cluster = _cluster(args.cluster)
    except ConfigError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    txns = _client_txns(args)
    results = asyncio.run(_submit_all(cluster, txns, args.mode, args.timeout, args.concurrency))
    failed = 0
    for i, (txn, res) in enumerate(zip(txns, results)):
        if isinstance(res, SubmitTimeout):
            failed += 1
            out.record({"txn": txn.hex(), "error": str(res), "leader_hint": res.leader_hint})
            continue
        if isinstance(res, BaseException):
            raise res
        if args.out:
            path = Path(args.out)
            if len(txns) > 1:
                path.mkdir(parents=True, exist_ok=True)
                path = path / f"receipt-{i}.bin"
            path.write_bytes(res.encode())
        out.record(_receipt_record(txn, res))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify(args, out: Output) -> int:
    from .receipts import Verdict, verify_receipt

    try:
        cluster = _cluster(args.cluster)
        data = Path(args.receipt).read_bytes()
    except ConfigError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    except OSError as exc:
        return _error(out, EXIT_RUNTIME, f"cannot read receipt: {exc.strerror}")
    try:
        text = data.decode("ascii").strip()
        data = bytes.fromhex(text) if text else data
    except (UnicodeDecodeError, ValueError):
        pass
    verdict: Verdict = verify_receipt(data, cluster.profile, cluster.keyring())
    rec = {"receipt": args.receipt, "ok": verdict.ok, "reason": verdict.reason}
    out.record(rec, f"{'valid' if verdict.ok else 'INVALID'}: {verdict.reason}")
    return EXIT_OK if verdict.ok else EXIT_FAIL


def cmd_status(args, out: Output) -> int:
    from .net.client import cluster_status_async, status_async

    try:
        cluster = _cluster(args.cluster)
    except ConfigError as exc:
        return _error(out, EXIT_USAGE, str(exc))
    if args.id is not None:
        if not 0 <= args.id < cluster.n:
            return _error(out, EXIT_USAGE, f"replica id {args.id} is not in the cluster")
        states = {args.id: asyncio.run(status_async(cluster, args.id, args.timeout))}
    else:
        states = dict(enumerate(asyncio.run(cluster_status_async(cluster, args.timeout))))
    reachable = 0
    over_lag = False
    for rid, st in states.items():
        if st is None:
            out.record({"replica": rid, "reachable": False}, f"replica {rid}: unreachable")
            continue
        reachable += 1
        over_lag |= st["lag"] > st["lag_window"]
        out.record({"reachable": True, **st},
                   f"replica {rid}: view={st['view']} phase={st['phase']} leader={st['leader']} "
                   f"commit={st['commit_index']} audit={st['audit_index']} lag={st['lag']}"
                   f"/{st['lag_window']}")
    if not reachable:
        return EXIT_RUNTIME
    return EXIT_FAIL if args.check_lag and over_lag else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pftlog", description="Platform-fault-tolerant replicated log")
    parser.add_argument("--json", action="store_true", help="one JSON record per output line")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plan", help="size a deployment and print its quorum profile")
    p.add_argument("--c", type=int, default=0, help="independent node crashes tolerated")
    p.add_argument("--pi-safe", type=int, default=0, help="compromised platforms tolerated for safety")
    p.add_argument("--pi-live", type=int, default=0, help="compromised platforms tolerated for liveness")
    p.add_argument("--platform-sizes", type=_sizes, help="comma-separated nodes per platform")
    p.add_argument("--init-cluster", metavar="DIR", help="also write keys and a local cluster file")
    p.add_argument("--base-port", type=int, default=7100)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--signing-interval", type=int, default=1)
    p.add_argument("--view-timeout-ms", type=int, default=500)
    p.add_argument("--lag-window", type=int, default=64)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sim", help="run a simulated scenario and check invariants")
    p.add_argument("scenario", help="scenario YAML file or shipped scenario name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--seeds", type=int, default=1, help="run this many consecutive seeds")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="directory for trace.jsonl and report.json")
    p.add_argument("--set", type=_assignment, action="append", metavar="KEY=VALUE",
                   help="override a scenario key")
    p.add_argument("--verbose", action="store_true", help="include final replica states")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("run", help="run one replica of a cluster")
    p.add_argument("cluster", help="cluster YAML file")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--data-dir", help="durable log directory")
    p.add_argument("--listen", help="host:port to bind instead of the configured address")
    p.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("client", help="submit transactions and print receipts")
    p.add_argument("cluster")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--txn", help="raw transaction text")
    what.add_argument("--put", nargs=2, metavar=("KEY", "VALUE"), help="key-value put")
    what.add_argument("--count", type=int, default=1, help="generate this many puts")
    p.add_argument("--mode", choices=("commit", "audit"), default="commit")
    p.add_argument("--client-id", type=int, default=1)
    p.add_argument("--client-seq", type=int, default=0)
    p.add_argument("--concurrency", type=int, default=16)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", help="receipt file (or directory for several)")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("verify-receipt", help="check a receipt offline")
    p.add_argument("receipt", help="receipt file, binary or hex")
    p.add_argument("cluster", help="cluster YAML file with the public keys")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("status", help="print view, commit and audit indices")
    p.add_argument("cluster")
    p.add_argument("--id", type=int)
    p.add_argument("--timeout", type=float, default=2.0)
    p.add_argument("--check-lag", action="store_true", help="exit 1 if any lag exceeds the window")
    p.set_defaults(func=cmd_status)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Output(args.json)
    try:
        return args.func(args, out)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # last-resort diagnostic for operators
        return _error(out, EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
