"""Command-line entry point: ``attestbox <group> <command>`` (or ``python -m attestbox.cli``)."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import time

from . import metrics, report
from .errors import (
    AttestationRejected,
    AttestboxError,
    ClientError,
    OnboardFailed,
    PolicyError,
    ServerError,
)

log = logging.getLogger("attestbox")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ONBOARD_FAILED = 2
EXIT_POLICY_INVALID = 3
EXIT_ATTESTATION_REJECTED = 4
EXIT_SERVER_ERROR = 5


def _write_ready(path: str | None, text: str) -> None:
    if not path:
        return
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)


def _dump_phases(phases: metrics.PhaseLog, path: str | None) -> None:
    if path:
        phases.dump(path)


# -- policy -----------------------------------------------------------------

def cmd_policy_hash(args: argparse.Namespace) -> int:
    from .policy import load_policy, policy_digest

    try:
        policy = load_policy(args.file)
    except (PolicyError, OSError) as exc:
        print(f"invalid policy: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_POLICY_INVALID
    print(policy_digest(policy).hex())
    return EXIT_OK


def cmd_policy_fixture(args: argparse.Namespace) -> int:
    from .deploy import create_fixture
    from .policy import ExecutionStrategy, policy_digest

    fx = create_fixture(
        args.dir,
        args.guest,
        server_endpoint=args.server,
        proxy_endpoint=args.proxy,
        strategy=ExecutionStrategy(args.strategy),
        rng_seed=bytes.fromhex(args.rng_seed) if args.rng_seed else None,
    )
    print(f"wrote {fx.policy_path} (digest {policy_digest(fx.policy).hex()})")
    for pid in fx.identities:
        print(f"  {pid}: {fx.cert(pid)}")
    return EXIT_OK


# -- proxy attestation service ----------------------------------------------

def cmd_pas_init(args: argparse.Namespace) -> int:
    from .attestation import TrustBundle

    TrustBundle.generate().save(args.dir)
    print(f"trust material written to {args.dir}")
    return EXIT_OK


def cmd_pas_serve(args: argparse.Namespace) -> int:
    from .attestation import ProxyState, load_cert, load_root_ca
    from .proxy import ProxyServer, split_endpoint

    phases = metrics.PhaseLog()
    with phases.phase(metrics.PROXY_START):
        key, cert = load_root_ca(args.root_ca)
        with open(args.device_ca, "rb") as fh:
            device_ca = load_cert(fh.read())
        state = ProxyState(key, cert, device_ca, lifetime_s=args.lifetime)
        server = ProxyServer(state, split_endpoint(args.listen))
    _dump_phases(phases, args.metrics)
    log.info("proxy attestation service on %s", server.endpoint)
    _write_ready(args.ready_file, server.endpoint)
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- runtime ----------------------------------------------------------------

def _runtime_args(args: argparse.Namespace) -> list[str]:
    out = ["--policy", args.policy]
    for flag in ("proxy", "listen", "metrics", "ready_file"):
        value = getattr(args, flag)
        if value:
            out += ["--" + flag.replace("_", "-"), value]
    out += ["--device-key", args.device_key, "--device-cert", args.device_cert]
    out += ["--idle-timeout", str(args.idle_timeout)]
    return out


def cmd_runtime_serve(args: argparse.Namespace) -> int:
    """Launch the runtime inside a ProcessIsolate and relay its exit status."""
    from .isolate import ProcessIsolate
    from .policy import load_policy

    try:
        load_policy(args.policy)
    except (PolicyError, OSError) as exc:
        print(f"invalid policy: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_POLICY_INVALID
    child = ProcessIsolate.spawn(
        _runtime_args(args), device_key_path=args.device_key, device_cert_path=args.device_cert
    )
    signal.signal(signal.SIGTERM, lambda *_: child.terminate())
    try:
        return child.wait()
    except KeyboardInterrupt:
        child.terminate()
        return child.wait()


def cmd_runtime_isolate_main(args: argparse.Namespace) -> int:
    from .isolate import ProcessIsolate
    from .policy import load_policy
    from .proxy import ProxyClient
    from .server import RuntimeServer, State

    try:
        policy = load_policy(args.policy)
    except (PolicyError, OSError) as exc:
        print(f"invalid policy: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_POLICY_INVALID
    isolate = ProcessIsolate.from_env()
    phases = metrics.PhaseLog()
    server = RuntimeServer(
        policy, isolate, ProxyClient(args.proxy or policy.proxy_endpoint), phases=phases, listen=args.listen
    )
    try:
        server.boot()
    except OnboardFailed as exc:
        print(f"onboarding failed: {exc}", file=sys.stderr)
        _dump_phases(phases, args.metrics)
        return EXIT_ONBOARD_FAILED
    endpoint = server.listen()
    log.info("runtime serving on %s", endpoint)
    _write_ready(args.ready_file, endpoint)
    signal.signal(signal.SIGTERM, lambda *_: server.stop())
    thread = server.start()
    deadline = time.monotonic() + args.idle_timeout if args.idle_timeout > 0 else None
    try:
        while thread.is_alive():
            thread.join(0.2)
            if deadline is not None and time.monotonic() > deadline and not server.done.is_set():
                log.warning("giving up after %.0f s in state %s", args.idle_timeout, server.lifecycle.describe())
                server.stop()
    except KeyboardInterrupt:
        server.stop()
        thread.join()
    _dump_phases(phases, args.metrics)
    if server.state is State.FINISHED:
        return EXIT_OK
    print(f"runtime ended in state {server.lifecycle.describe()}", file=sys.stderr)
    tail = server.guest_log.text()
    if tail:
        print(tail, file=sys.stderr)
    return EXIT_FAILED


def cmd_runtime_measure(args: argparse.Namespace) -> int:
    from .isolate import runtime_image_digest

    print(runtime_image_digest().hex())
    return EXIT_OK


# -- client -----------------------------------------------------------------

def _client_session(args: argparse.Namespace, phases: metrics.PhaseLog):
    from .client import ClientIdentity, connect
    from .policy import load_policy

    policy = load_policy(args.policy)
    identity = ClientIdentity.load(args.cert, args.key)
    return connect(policy, identity, endpoint=args.endpoint, phases=phases)


def _run_client(args: argparse.Namespace, body) -> int:
    phases = metrics.PhaseLog()
    try:
        with _client_session(args, phases) as conn:
            body(conn, phases)
    except AttestationRejected as exc:
        print(f"attestation rejected: {exc}", file=sys.stderr)
        return EXIT_ATTESTATION_REJECTED
    except ServerError as exc:
        print(f"server error: {exc}", file=sys.stderr)
        return EXIT_SERVER_ERROR
    except PolicyError as exc:
        print(f"invalid policy: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_POLICY_INVALID
    except (ClientError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        _dump_phases(phases, args.metrics)
    return EXIT_OK


def cmd_client_provision(args: argparse.Namespace) -> int:
    if not args.path or len(args.path) != len(args.file or []):
        print("give one --file per --path", file=sys.stderr)
        return EXIT_FAILED

    def body(conn, phases):
        for remote, local in zip(args.path, args.file):
            with open(local, "rb") as fh:
                data = fh.read()
            name = metrics.PROVISION_PROGRAM if remote == conn.policy.program_entry_path else metrics.PROVISION_DATA
            with phases.phase(name):
                conn.provision_file(remote, data)
            print(f"provisioned {remote} ({len(data)} bytes)")

    return _run_client(args, body)


def cmd_client_result(args: argparse.Namespace) -> int:
    outs = args.file or []
    if not args.path or (outs and len(outs) != len(args.path)):
        print("give --path, and optionally one --file per --path", file=sys.stderr)
        return EXIT_FAILED

    def body(conn, phases):
        for i, remote in enumerate(args.path):
            with phases.phase(metrics.FETCH_RESULT):
                data = conn.fetch_result(remote, timeout=args.timeout)
            if outs:
                with open(outs[i], "wb") as fh:
                    fh.write(data)
            else:
                sys.stdout.buffer.write(data)
                sys.stdout.buffer.flush()

    return _run_client(args, body)


def cmd_client_attest_only(args: argparse.Namespace) -> int:
    def body(conn, phases):
        print(f"runtime attested; policy digest {conn.policy_digest().hex()}")

    return _run_client(args, body)


# -- bench / report ---------------------------------------------------------

def cmd_bench_fs(args: argparse.Namespace) -> int:
    from .bench import BenchConfig, Mode, Pattern, Target, run_bench

    cfg = BenchConfig(
        file_size=args.size,
        buffer_size=args.buffer,
        pattern=Pattern(args.pattern),
        mode=Mode(args.mode),
        seed=args.seed,
        repetitions=args.reps,
    )
    rep = run_bench(cfg, Target(args.target), host_dir=args.host_dir)
    rep.write_json(args.json)
    if args.csv:
        rep.write_csv(args.csv)
    if args.figure:
        report.bench_figure([rep.to_json()], args.figure)
    print(
        f"{rep.mode}/{rep.pattern}/{rep.target} ({rep.backing_fs}): median {rep.median_bps / report.GIB:.3f} GiB/s"
        f" [min {rep.min_bps / report.GIB:.3f}, max {rep.max_bps / report.GIB:.3f}], spread {rep.spread:.1%},"
        f" {rep.ops_per_repetition[0]} ops/repetition"
    )
    return EXIT_OK


def cmd_report_bench(args: argparse.Namespace) -> int:
    reports = report.load_bench_reports(args.reports)
    report.bench_figure(reports, args.figure)
    print(f"wrote {args.figure}")
    return EXIT_OK


def cmd_report_phases(args: argparse.Namespace) -> int:
    phases = report.merge_phases(metrics.PhaseLog.load(p) for p in args.metrics)
    if args.csv:
        report.phases_csv(phases, args.csv)
    if args.figure:
        report.phases_figure(phases, args.figure)
    for name, ms in phases.items():
        print(f"{ms:12.3f} ms  {name}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attestbox", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    groups = ap.add_subparsers(dest="group", required=True)

    pol = groups.add_parser("policy", help="policy utilities").add_subparsers(dest="cmd", required=True)
    p = pol.add_parser("hash", help="print the policy digest (hex)")
    p.add_argument("file")
    p.set_defaults(func=cmd_policy_hash)
    p = pol.add_parser("fixture", help="write a local demo deployment (keys, identities, policy)")
    p.add_argument("dir")
    p.add_argument("--guest", default="wordcount", choices=["wordcount", "copy", "random", "intcodec", "intcodec_native"])
    p.add_argument("--server", default="127.0.0.1:7443", help="runtime endpoint host:port")
    p.add_argument("--proxy", default="127.0.0.1:7080", help="proxy endpoint host:port")
    p.add_argument("--strategy", default="Jit", choices=["Jit", "Interpret"])
    p.add_argument("--rng-seed", help="64 hex digits; makes random_get deterministic")
    p.set_defaults(func=cmd_policy_fixture)

    pas = groups.add_parser("pas", help="proxy attestation service").add_subparsers(dest="cmd", required=True)
    p = pas.add_parser("init", help="generate root CA, device CA and a device key")
    p.add_argument("dir")
    p.set_defaults(func=cmd_pas_init)
    p = pas.add_parser("serve", help="run the HTTP service")
    p.add_argument("--root-ca", required=True, help="directory holding root_ca.key and root_ca.pem")
    p.add_argument("--device-ca", required=True, help="device CA certificate (PEM)")
    p.add_argument("--listen", default="127.0.0.1:7080")
    p.add_argument("--lifetime", type=int, default=86400, help="issued certificate lifetime (s)")
    p.add_argument("--metrics", help="write phase timings (JSON)")
    p.add_argument("--ready-file", help="write the bound endpoint here once listening")
    p.set_defaults(func=cmd_pas_serve)

    rt = groups.add_parser("runtime", help="isolate-side runtime").add_subparsers(dest="cmd", required=True)
    for name, func, hidden in (("serve", cmd_runtime_serve, False), ("_isolate-main", cmd_runtime_isolate_main, True)):
        p = rt.add_parser(name, help=None if hidden else "onboard, then serve one computation")
        p.add_argument("--policy", required=True)
        p.add_argument("--proxy", help="proxy endpoint (default: from the policy)")
        p.add_argument("--listen", help="bind address (default: the policy's server_endpoint)")
        p.add_argument("--device-key", required=True)
        p.add_argument("--device-cert", required=True)
        p.add_argument("--metrics", help="write phase timings (JSON)")
        p.add_argument("--ready-file", help="write the bound endpoint here once serving")
        p.add_argument("--idle-timeout", type=float, default=0, help="stop after this many seconds (0: never)")
        p.set_defaults(func=func)
    p = rt.add_parser("measure", help="print the runtime measurement (hex)")
    p.set_defaults(func=cmd_runtime_measure)

    cl = groups.add_parser("client", help="principal-side client").add_subparsers(dest="cmd", required=True)
    for name, func in (
        ("provision", cmd_client_provision),
        ("result", cmd_client_result),
        ("attest-only", cmd_client_attest_only),
    ):
        p = cl.add_parser(name)
        p.add_argument("--policy", required=True)
        p.add_argument("--cert", required=True)
        p.add_argument("--key", required=True)
        p.add_argument("--endpoint", help="runtime endpoint (default: from the policy)")
        p.add_argument("--metrics", help="write phase timings (JSON)")
        if name != "attest-only":
            p.add_argument("--path", action="append", help="remote path (repeatable)")
            p.add_argument("--file", action="append", help="local file paired with --path (repeatable)")
        if name == "result":
            p.add_argument("--timeout", type=float, default=120.0, help="seconds to wait for the result")
        p.set_defaults(func=func)

    bn = groups.add_parser("bench", help="benchmarks").add_subparsers(dest="cmd", required=True)
    p = bn.add_parser("fs", help="file-system bandwidth")
    p.add_argument("--mode", choices=["read", "write", "update"], default="read")
    p.add_argument("--pattern", choices=["inorder", "random"], default="inorder")
    p.add_argument("--target", choices=["vfs", "host"], default="vfs")
    p.add_argument("--json", required=True, help="report output (JSON)")
    p.add_argument("--csv", help="per-repetition rows (CSV)")
    p.add_argument("--figure", help="bandwidth figure (PNG)")
    p.add_argument("--size", type=int, default=64 * 1024 * 1024)
    p.add_argument("--buffer", type=int, default=16 * 1024)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--host-dir", help="directory for the host target (default: system temp)")
    p.set_defaults(func=cmd_bench_fs)

    rp = groups.add_parser("report", help="figures from saved reports").add_subparsers(dest="cmd", required=True)
    p = rp.add_parser("bench", help="bandwidth figure from bench JSON files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--figure", required=True)
    p.set_defaults(func=cmd_report_bench)
    p = rp.add_parser("phases", help="deployment overheads from --metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--csv")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_report_phases)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_FAILED
    except AttestboxError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
