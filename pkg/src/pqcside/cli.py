"""Command-line entry point: ``pqcside <subcommand> [flags]``.

Services (``nrf``, ``proxy``, ``wrapper``) print one ``READY {json}`` line
once bound and run until SIGINT/SIGTERM.  Where a subcommand accepts
``--config FILE`` (JSON), any flag given on the command line overrides the
file's value for that key.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
The ``PQCSIDE_LOG`` environment variable (error|warn|info|debug) sets the
log level; ``--log-level`` overrides it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("pqcside")


class CliConfigError(ValueError):
    pass


class UnknownLevel(CliConfigError):
    pass


def _load_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliConfigError(f"config file {path} must hold a JSON object")
    return data


def _overlay(base: dict, overrides: dict) -> dict:
    """Flags win over file values; flags left unset (None) do not."""
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _ca_alg(level: str):
    from .provider import UnknownAlgorithm, parse_ml_dsa_level

    try:
        return parse_ml_dsa_level(level)
    except UnknownAlgorithm:
        raise UnknownLevel(f"unknown CA level {level!r}; expected 44, 65 or 87") from None


# --- subcommands ----------------------------------------------------------------


def cmd_keygen(args) -> int:
    from .certs import generate_credentials, validate_chain, write_credentials
    from .provider import DEFAULT_PROVIDER

    suite = DEFAULT_PROVIDER.suite(args.suite)
    ca_alg = _ca_alg(args.ca_level) if args.suite == "pqc" else suite.sig_alg
    subjects = _csv_list(args.subjects)
    if not subjects:
        raise CliConfigError("--subjects must name at least one subject")
    creds = generate_credentials(subjects, ca_alg=ca_alg, entity_alg=suite.sig_alg,
                                 lifetime_s=args.lifetime_days * 86400)
    for subject, (_, chain) in creds.entities.items():
        report = validate_chain(chain, creds.root)
        if not report.accepted:
            raise RuntimeError(f"freshly issued chain for {subject} failed validation: {report.failure_reason}")
    try:
        paths = write_credentials(creds, args.out_dir)
    except OSError as exc:
        raise RuntimeError(f"cannot write credentials to {args.out_dir}: {exc}") from None
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def _nrf_secure(cfg: dict):
    from .certs import read_chain, read_key_file
    from .handshake import BadConfig, HandshakeConfig, Role
    from .proxy import CredentialError

    if not cfg.get("suite"):
        return None

    def load(reader, key):
        path = cfg.get(key)
        if not path:
            raise CliConfigError(f"secure NRF requires {key}")
        try:
            return reader(path)
        except FileNotFoundError:
            raise CredentialError(f"credential file not found: {path}") from None
        except ValueError as exc:
            raise CredentialError(f"cannot parse credential file {path}: {exc}") from None

    hs_cfg = HandshakeConfig(role=Role.SERVER, suites=(cfg["suite"],),
                             local_chain=load(read_chain, "chain_file"), local_key=load(read_key_file, "key_file"))
    try:
        hs_cfg.check()
    except BadConfig as exc:
        raise CliConfigError(str(exc)) from None
    return hs_cfg


def cmd_nrf(args) -> int:
    from .sba import NrfService
    from .service import run_foreground

    cfg = _overlay({"listen_address": "127.0.0.1:8000"}, _load_json(args.config))
    cfg = _overlay(cfg, {"listen_address": args.listen, "suite": args.suite, "chain_file": args.chain,
                         "key_file": args.key})
    unknown = set(cfg) - {"listen_address", "suite", "chain_file", "key_file"}
    if unknown:
        raise CliConfigError(f"unknown nrf config keys: {sorted(unknown)}")
    return run_foreground(NrfService(cfg["listen_address"], _nrf_secure(cfg)))


def cmd_proxy(args) -> int:
    from .proxy import ProxyConfig, Sidecar
    from .service import run_foreground

    cfg = _overlay(_load_json(args.config), {
        "mode": args.mode, "role": args.role, "listen_address": args.listen, "upstream_address": args.upstream,
        "suite": args.suite, "chain_file": args.chain, "key_file": args.key, "trust_root_file": args.trust_root,
        "session_policy": args.session_policy, "admin_address": args.admin,
        "http_aware": False if args.raw else None, "mutual_auth": True if args.mutual_auth else None,
        "upstream_timeout_ms": args.timeout_ms,
    })
    if cfg.get("mode", "secure") == "passthrough" and args.suite is None:
        cfg["suite"] = None
    return run_foreground(Sidecar(ProxyConfig.from_dict(cfg)))


def cmd_wrapper(args) -> int:
    from .service import run_foreground
    from .wrapper import WrapperService

    return run_foreground(WrapperService(args.listen))


def cmd_nf(args) -> int:
    from .certs import read_certificate
    from .handshake import HandshakeConfig, Role
    from .sba import build_default_plan, run_nf_client, write_samples_csv

    secure = None
    if args.suite:
        if not args.trust_root:
            raise CliConfigError("--suite requires --trust-root")
        try:
            root = read_certificate(args.trust_root)
        except FileNotFoundError:
            raise CliConfigError(f"trust root not found: {args.trust_root}") from None
        secure = HandshakeConfig(role=Role.CLIENT, suites=(args.suite,), trust_root=root)
    role = args.role.upper()
    samples = run_nf_client(role, args.upstream, build_default_plan(role, args.transactions), args.timeout_ms,
                            secure=secure, session_policy=args.session_policy)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_samples_csv(samples, fh)
    else:
        write_samples_csv(samples, sys.stdout)
    failed = sum(not s.success for s in samples)
    if failed:
        log.warning("%d of %d transactions failed", failed, len(samples))
    return EXIT_OK


def bench_specs(args) -> list:
    from .harness import ScenarioSpec

    data = _load_json(args.config)
    entries = data.get("scenarios")
    if entries is None:
        names = _csv_list(args.scenarios) if args.scenarios else ["native-classical", "sidecar-classical",
                                                                    "sidecar-pqc"]
        entries = [{"name": n} for n in names]
    if not isinstance(entries, list):
        raise CliConfigError("'scenarios' must be a list of scenario objects")
    defaults = {k: v for k, v in data.items() if k not in ("scenarios", "out_dir")}
    overrides = {"repetitions": args.repetitions, "transactions": args.transactions, "warmup": args.warmup,
                 "session_policy": args.session_policy,
                 "nf_roles": _csv_list(args.roles) if args.roles else None}
    specs = []
    for entry in entries:
        merged = _overlay(_overlay(defaults, entry), overrides)
        if args.ca_level is not None and merged.get("name") == "sidecar-pqc":
            merged["ca_level"] = args.ca_level
        if merged.get("ca_level") is not None:
            _ca_alg(str(merged["ca_level"]))
        specs.append(ScenarioSpec.from_dict(merged))
    return specs


def cmd_bench(args) -> int:
    from .harness import emit_report, run_benchmark

    data = _load_json(args.config)
    out_dir = args.out_dir or data.get("out_dir") or "bench-out"
    specs = bench_specs(args)

    def progress(spec, i):
        log.info("%s repetition %d/%d done", spec.label, i + 1, spec.repetitions)

    t0 = time.monotonic()
    report = run_benchmark(specs, out_dir, progress=progress)
    for path in emit_report(report, out_dir):
        print(path)
    for label, s in report.summary["scenarios"].items():
        st = s["l_sbi"]["all"]
        med = "n/a" if st is None else f"{st['median']:.3f} ms"
        print(f"{label}: median L_SBI {med} over {s['measured_samples']} samples")
    log.info("benchmark finished in %.1fs", time.monotonic() - t0)
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import emit_report, load_report

    for path in emit_report(load_report(args.out_dir), args.out_dir):
        print(path)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pqcside",
        description="Quantum-safe sidecar proxies for SBI signaling and their benchmark harness.",
        epilog="Flags override values from --config files. Exit codes: 0 ok, 2 config error, 3 runtime failure.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", choices=sorted(LOG_LEVELS), help="log verbosity (default: $PQCSIDE_LOG or warn)")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)

    k = sub.add_parser("keygen", help="generate a root CA and entity credentials")
    k.add_argument("--ca-level", default="65", help="ML-DSA level for the CA: 44, 65 or 87 (default 65)")
    k.add_argument("--suite", choices=("pqc", "classical"), default="pqc", help="suite the entity keys serve")
    k.add_argument("--out-dir", required=True, help="directory for root.*, <subject>.{cert,key,chain}")
    k.add_argument("--subjects", default="nrf", help="comma-separated subject names (default: nrf)")
    k.add_argument("--lifetime-days", type=int, default=365, help="certificate validity in days")
    k.set_defaults(func=cmd_keygen)

    n = sub.add_parser("nrf", help="run the NRF service")
    n.add_argument("--config", help="JSON file with listen_address, suite, chain_file, key_file")
    n.add_argument("--listen", help="bind address host:port (default 127.0.0.1:8000)")
    n.add_argument("--suite", choices=("pqc", "classical"), help="serve over the secure channel with this suite")
    n.add_argument("--chain", help="certificate chain file (secure mode)")
    n.add_argument("--key", help="signing key file (secure mode)")
    n.set_defaults(func=cmd_nrf)

    f = sub.add_parser("nf", help="run one NF role's workload and print samples as CSV")
    f.add_argument("--role", required=True, choices=("AMF", "AUSF", "UDM", "SMF", "amf", "ausf", "udm", "smf"))
    f.add_argument("--upstream", required=True, help="NRF or local sidecar address host:port")
    f.add_argument("--transactions", type=int, default=100, help="plan length (default 100)")
    f.add_argument("--timeout-ms", type=int, default=2000, help="per-transaction timeout")
    f.add_argument("--session-policy", choices=("pooled", "per_transaction"), default="pooled")
    f.add_argument("--suite", choices=("pqc", "classical"), help="talk to a secure NRF directly")
    f.add_argument("--trust-root", help="root certificate for --suite")
    f.add_argument("--out", help="write samples CSV here instead of stdout")
    f.set_defaults(func=cmd_nf)

    x = sub.add_parser("proxy", help="run a sidecar proxy")
    x.add_argument("--config", help="JSON file with ProxyConfig field names as keys")
    x.add_argument("--mode", choices=("passthrough", "secure"))
    x.add_argument("--role", choices=("client-side", "server-side"))
    x.add_argument("--listen", help="local listen address host:port")
    x.add_argument("--upstream", help="peer sidecar (client-side) or local service (server-side) address")
    x.add_argument("--suite", choices=("pqc", "classical"), help="cipher suite for the secure tunnel")
    x.add_argument("--chain", help="certificate chain file")
    x.add_argument("--key", help="signing key file")
    x.add_argument("--trust-root", help="root certificate file")
    x.add_argument("--session-policy", choices=("pooled", "per_transaction"))
    x.add_argument("--admin", help="admin endpoint address serving GET /metrics")
    x.add_argument("--raw", action="store_true", help="relay raw bytes instead of parsing HTTP")
    x.add_argument("--mutual-auth", action="store_true", help="require a client certificate chain")
    x.add_argument("--timeout-ms", type=int, help="upstream response timeout")
    x.set_defaults(func=cmd_proxy)

    w = sub.add_parser("wrapper", help="run the KEM/signature HTTP wrapper")
    w.add_argument("--listen", default="127.0.0.1:8100", help="bind address host:port")
    w.set_defaults(func=cmd_wrapper)

    b = sub.add_parser("bench", help="run benchmark scenarios and write reports")
    b.add_argument("--config", help="JSON with 'scenarios' (list of ScenarioSpec objects) and shared defaults")
    b.add_argument("--scenarios", help="comma-separated scenario names when no config is given")
    b.add_argument("--out-dir", help="output directory (default bench-out)")
    b.add_argument("--repetitions", type=int, help="repetitions R per scenario")
    b.add_argument("--transactions", type=int, help="measured transactions N per role")
    b.add_argument("--warmup", type=int, help="warmup transactions W per role")
    b.add_argument("--session-policy", choices=("pooled", "per_transaction"))
    b.add_argument("--ca-level", help="CA ML-DSA level for pqc scenarios")
    b.add_argument("--roles", help="comma-separated NF roles")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="re-aggregate reports from raw files")
    r.add_argument("--out-dir", required=True, help="benchmark output directory")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging(level_name: Optional[str]) -> None:
    import os

    name = (level_name or os.environ.get("PQCSIDE_LOG") or "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    from .harness import SpecError, StartupFailure
    from .proxy import ConfigError
    from .service import BindFailure

    try:
        return args.func(args)
    except (CliConfigError, ConfigError, SpecError) as exc:
        print(f"pqcside {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BindFailure, StartupFailure) as exc:
        print(f"pqcside {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"pqcside {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
