"""Benchmark orchestration: scenarios, repetitions, raw capture and reports.

Each repetition starts fresh service processes (NRF, plus a sidecar pair per
NF role in sidecar scenarios), runs ``W`` warmup and ``N`` measured
transactions per role from this process, collects proxy metrics and
resource samples, and tears everything down.

Raw rows are appended to CSV files as repetitions finish.  Every aggregate
file is computed from those raw files, so ``report`` on an output directory
reproduces ``summary.json`` byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import http.client
import json
import logging
import os
import platform
import selectors
import signal
import subprocess
import sys
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import psutil

from . import __version__
from .certs import generate_credentials, read_certificate, write_credentials
from .handshake import HandshakeConfig, Role
from .provider import DEFAULT_PROVIDER, SUITES, Alg, CryptoProvider, UnknownAlgorithm, parse_ml_dsa_level
from .sba import KINDS, NF_TYPES, TransactionSample, build_default_plan, run_nf_client
from .stats import SummaryStats, ci_over_run_medians, summarize
from .transport import parse_address

log = logging.getLogger(__name__)

SCENARIOS = ("native-plain", "native-classical", "sidecar-classical", "sidecar-pqc")
SCENARIO_SUITE = {
    "native-plain": None,
    "native-classical": "classical",
    "sidecar-classical": "classical",
    "sidecar-pqc": "pqc",
}
STARTUP_TIMEOUT_S = 20.0

RAW_SAMPLES = "raw_samples.csv"
RAW_BREAKDOWNS = "raw_breakdowns.csv"
RAW_COUNTERS = "raw_counters.csv"
RESOURCES = "resources.csv"
RUN_META = "run_meta.json"

SAMPLE_COLUMNS = ("scenario", "repetition", "nf_role", "transaction_id", "kind", "l_sbi_us", "success", "warmup")
BREAKDOWN_COLUMNS = ("scenario", "repetition", "nf_role", "transaction_id", "side", "warmup",
                     "delta_t_us", "handshake_us", "t_enc_us", "t_sig_us", "t_ver_us")
COUNTER_COLUMNS = ("scenario", "repetition", "nf_role", "side", "tunnels_opened", "tunnels_closed",
                   "handshakes_performed", "handshake_failures", "records_sealed", "records_opened",
                   "auth_failures")
RESOURCE_COLUMNS = ("scenario", "repetition", "process", "t_s", "cpu_percent", "mem_mb")


class HarnessError(RuntimeError):
    pass


class SpecError(HarnessError, ValueError):
    pass


class StartupFailure(HarnessError):
    pass


class IncompleteRun(HarnessError):
    pass


@dataclass
class ScenarioSpec:
    name: str
    suite: Optional[str] = None
    ca_level: Optional[str] = None
    session_policy: str = "per_transaction"
    repetitions: int = 30
    transactions: int = 100
    warmup: int = 5
    nf_roles: tuple = NF_TYPES
    timeout_ms: int = 2000
    base_port: Optional[int] = None
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise SpecError(f"unknown scenario {self.name!r}; expected one of {SCENARIOS}")
        expected = SCENARIO_SUITE[self.name]
        if self.suite is None:
            self.suite = expected
        elif self.suite != expected:
            raise SpecError(f"scenario {self.name} runs suite {expected!r}, not {self.suite!r}")
        if self.suite is not None and self.suite not in SUITES:
            raise SpecError(f"suite {self.suite!r} is not benchmarkable")
        if self.suite == "pqc":
            try:
                self.ca_level = parse_ml_dsa_level(self.ca_level or "65").label.removeprefix("ML-DSA-")
            except UnknownAlgorithm:
                raise SpecError(f"unknown CA level {self.ca_level!r}; expected 44, 65 or 87") from None
        elif self.ca_level is not None:
            raise SpecError("ca_level applies to pqc scenarios only")
        self.nf_roles = tuple(r.upper() for r in self.nf_roles)
        for role in self.nf_roles:
            if role not in NF_TYPES:
                raise SpecError(f"unknown NF role {role!r}")
        if not self.nf_roles:
            raise SpecError("at least one NF role is required")
        if self.session_policy not in ("per_transaction", "pooled"):
            raise SpecError(f"unknown session policy {self.session_policy!r}")
        if self.repetitions < 1 or self.transactions < 1 or self.warmup < 0:
            raise SpecError("repetitions and transactions must be >= 1, warmup >= 0")
        if self.warmup >= self.transactions:
            raise SpecError("warmup must be smaller than transactions")
        if self.label is None:
            self.label = self.name + (f"-ca{self.ca_level}" if self.ca_level else "")

    @property
    def sidecar(self) -> bool:
        return self.name.startswith("sidecar")

    @property
    def secure(self) -> bool:
        return self.suite is not None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["nf_roles"] = list(self.nf_roles)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        if "nf_roles" in data:
            data["nf_roles"] = tuple(data["nf_roles"])
        if data.get("ca_level") is not None:
            data["ca_level"] = str(data["ca_level"])
        return cls(**data)


def check_provider(provider: CryptoProvider) -> None:
    if not provider.benchmarkable:
        raise SpecError(f"provider {provider.name} is a test double and cannot be benchmarked")


# --- processes -----------------------------------------------------------------------


@dataclass
class ServiceProcess:
    name: str
    proc: subprocess.Popen
    info: dict

    @property
    def address(self) -> str:
        return self.info["listen"]

    def stop(self, timeout: float = 5.0) -> None:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        if self.proc.stdout:
            self.proc.stdout.close()


def spawn(name: str, args: Sequence[str], log_path: Path, timeout: float = STARTUP_TIMEOUT_S) -> ServiceProcess:
    """Start ``python -m pqcside <args>`` and wait for its READY line."""
    env = dict(os.environ, PQCSIDE_LOG=os.environ.get("PQCSIDE_LOG", "warn"))
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "ab") as err:
        proc = subprocess.Popen([sys.executable, "-m", "pqcside", *args], stdout=subprocess.PIPE,
                                stderr=err, env=env)
    sel = selectors.DefaultSelector()
    sel.register(proc.stdout, selectors.EVENT_READ)
    deadline = time.monotonic() + timeout
    line = b""
    try:
        while not line.endswith(b"\n"):
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not sel.select(remaining):
                raise StartupFailure(f"{name} did not report readiness within {timeout}s")
            chunk = os.read(proc.stdout.fileno(), 4096)
            if not chunk:
                proc.wait()
                tail = log_path.read_text(errors="replace").strip().splitlines()[-3:]
                raise StartupFailure(f"{name} exited with code {proc.returncode} before ready: {' | '.join(tail)}")
            line += chunk
    except StartupFailure:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
        raise
    finally:
        sel.close()
    head = line.split(b"\n", 1)[0].decode()
    if not head.startswith("READY "):
        proc.kill()
        raise StartupFailure(f"{name} printed unexpected output {head[:80]!r}")
    return ServiceProcess(name, proc, json.loads(head[6:]))


class ResourceSampler:
    """Samples CPU% and RSS of registered processes at a fixed period."""

    def __init__(self, period_s: float = 1.0) -> None:
        self.period_s = period_s
        self.rows: list[tuple[str, float, float, float]] = []
        self._procs: dict[str, psutil.Process] = {}
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._t0 = time.monotonic()
        self._lock = threading.Lock()

    def add(self, name: str, pid: int) -> None:
        try:
            p = psutil.Process(pid)
            p.cpu_percent(None)  # prime the interval
        except psutil.Error:
            return
        with self._lock:
            self._procs[name] = p

    def sample(self) -> None:
        t = round(time.monotonic() - self._t0, 3)
        with self._lock:
            procs = list(self._procs.items())
        for name, p in procs:
            try:
                cpu = p.cpu_percent(None)
                mem = p.memory_info().rss / (1024 * 1024)
            except psutil.Error:
                continue
            self.rows.append((name, t, round(cpu, 1), round(mem, 2)))

    def _loop(self) -> None:
        while not self._stop.wait(self.period_s):
            self.sample()

    def start(self) -> "ResourceSampler":
        self._thread = threading.Thread(target=self._loop, name="resource-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.sample()
        return self.rows


def fetch_metrics(admin_address: str, timeout: float = 5.0) -> dict:
    host, port = parse_address(admin_address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("GET", "/metrics")
        return json.loads(conn.getresponse().read())
    finally:
        conn.close()


# --- repetitions -----------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: str
    repetition: int
    samples: dict[str, list[TransactionSample]]
    warmup_samples: dict[str, list[TransactionSample]] = field(default_factory=dict)
    breakdowns: list[dict] = field(default_factory=list)
    counters: list[dict] = field(default_factory=list)
    resources: list[tuple] = field(default_factory=list)

    def measured_count(self) -> int:
        return sum(len(v) for v in self.samples.values())


@dataclass
class Workspace:
    """Where a benchmark keeps credentials, proxy configs and process logs."""

    root: Path

    def creds_dir(self, spec: ScenarioSpec) -> Path:
        return self.root / "creds" / spec.label

    def config_dir(self, spec: ScenarioSpec) -> Path:
        return self.root / "configs" / spec.label

    def log_path(self, spec: ScenarioSpec, name: str) -> Path:
        return self.root / "logs" / spec.label / f"{name}.log"


def prepare_credentials(spec: ScenarioSpec, ws: Workspace, provider: CryptoProvider = DEFAULT_PROVIDER) -> None:
    if not spec.secure:
        return
    out = ws.creds_dir(spec)
    if (out / "root.cert").exists():
        return
    suite = provider.suite(spec.suite)
    ca_alg = Alg.parse(f"ML-DSA-{spec.ca_level}") if spec.ca_level else suite.sig_alg
    write_credentials(generate_credentials(["nrf"], ca_alg=ca_alg, entity_alg=suite.sig_alg, provider=provider), out)


def proxy_configs(spec: ScenarioSpec, ws: Workspace, role: str, nrf_address: str,
                  port_of) -> tuple[Path, Path]:
    """Write the server-side and client-side proxy configs for one role.

    The client-side config's ``upstream_address`` is a placeholder until
    the server-side proxy has bound; it is filled in by flag override.
    """
    creds = ws.creds_dir(spec)
    out = ws.config_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    mode = "secure" if spec.secure else "passthrough"
    common = {"mode": mode, "suite": spec.suite, "session_policy": spec.session_policy, "http_aware": True,
              "upstream_timeout_ms": spec.timeout_ms}
    server = dict(common, role="server-side", listen_address=f"127.0.0.1:{port_of('srv')}",
                  admin_address="127.0.0.1:0", upstream_address=nrf_address)
    client = dict(common, role="client-side", listen_address=f"127.0.0.1:{port_of('cli')}",
                  admin_address="127.0.0.1:0", upstream_address="127.0.0.1:1")
    if spec.secure:
        server.update(chain_file=str(creds / "nrf.chain"), key_file=str(creds / "nrf.key"))
        client.update(trust_root_file=str(creds / "root.cert"))
    paths = out / f"{role.lower()}-server.json", out / f"{role.lower()}-client.json"
    for path, cfg in zip(paths, (server, client)):
        path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return paths


def _port_allocator(spec: ScenarioSpec):
    counter = iter(range(10_000))

    def port_of(_what: str) -> int:
        return 0 if spec.base_port is None else spec.base_port + next(counter)

    return port_of


def run_repetition(spec: ScenarioSpec, index: int, ws: Workspace,
                   provider: CryptoProvider = DEFAULT_PROVIDER) -> RunResult:
    """Fresh processes, W warmup + N measured transactions per role, teardown."""
    check_provider(provider)
    prepare_credentials(spec, ws, provider)
    port_of = _port_allocator(spec)
    procs: list[ServiceProcess] = []
    sampler = ResourceSampler()
    result = RunResult(spec.label, index, {})
    try:
        nrf_args = ["nrf", "--listen", f"127.0.0.1:{port_of('nrf')}"]
        if spec.name == "native-classical":
            creds = ws.creds_dir(spec)
            nrf_args += ["--suite", spec.suite, "--chain", str(creds / "nrf.chain"), "--key", str(creds / "nrf.key")]
        nrf = spawn("nrf", nrf_args, ws.log_path(spec, "nrf"))
        procs.append(nrf)
        sampler.add("nrf", nrf.proc.pid)

        targets: dict[str, tuple[str, Optional[ServiceProcess], Optional[ServiceProcess]]] = {}
        for role in spec.nf_roles:
            if not spec.sidecar:
                targets[role] = (nrf.address, None, None)
                continue
            srv_cfg, cli_cfg = proxy_configs(spec, ws, role, nrf.address, port_of)
            srv = spawn(f"proxy-server-{role}", ["proxy", "--config", str(srv_cfg)],
                        ws.log_path(spec, f"proxy-server-{role}"))
            procs.append(srv)
            cli = spawn(f"proxy-client-{role}", ["proxy", "--config", str(cli_cfg), "--upstream", srv.address],
                        ws.log_path(spec, f"proxy-client-{role}"))
            procs.append(cli)
            sampler.add(f"proxy-server-{role}", srv.proc.pid)
            sampler.add(f"proxy-client-{role}", cli.proc.pid)
            targets[role] = (cli.address, cli, srv)
        sampler.start()

        client_secure = None
        if spec.name == "native-classical":
            client_secure = HandshakeConfig(
                role=Role.CLIENT, suites=(spec.suite,),
                trust_root=read_certificate(ws.creds_dir(spec) / "root.cert"), provider=provider,
            )
        for role in spec.nf_roles:
            address, cli, srv = targets[role]
            prefix = f"{spec.label}-r{index:02d}-{role}-"
            if spec.warmup:
                result.warmup_samples[role] = run_nf_client(
                    role, address, build_default_plan(role, spec.warmup), spec.timeout_ms,
                    secure=client_secure, session_policy=spec.session_policy, id_prefix=prefix + "w",
                )
            result.samples[role] = run_nf_client(
                role, address, build_default_plan(role, spec.transactions), spec.timeout_ms,
                secure=client_secure, session_policy=spec.session_policy, id_prefix=prefix + "m",
            )
            if cli is not None:
                _collect_proxy(result, role, cli, srv)
    except StartupFailure as exc:
        raise StartupFailure(f"{spec.label} repetition {index}: {exc}") from None
    finally:
        result.resources = sampler.stop()
        for p in reversed(procs):
            p.stop()

    for role in spec.nf_roles:
        got = len(result.samples.get(role, ()))
        if got != spec.transactions:
            raise IncompleteRun(f"{spec.label} repetition {index}: {role} produced {got} of {spec.transactions} samples")
    ids = {s.transaction_id for v in (*result.samples.values(), *result.warmup_samples.values()) for s in v}
    stray = [b["transaction_id"] for b in result.breakdowns if b["transaction_id"] not in ids]
    if stray:
        raise IncompleteRun(f"{spec.label} repetition {index}: proxy reported unknown transactions {stray[:3]}")
    return result


def _collect_proxy(result: RunResult, role: str, cli: ServiceProcess, srv: ServiceProcess) -> None:
    for side, proc in (("client", cli), ("server", srv)):
        snap = fetch_metrics(proc.info["admin"])
        result.counters.append({"nf_role": role, "side": side, **{k: snap[k] for k in COUNTER_COLUMNS[4:]}})
        for b in snap["transactions"]:
            warm = b["transaction_id"].rsplit("-", 1)[-1].startswith("w")
            result.breakdowns.append({"nf_role": role, "warmup": warm, **b})


# --- raw capture ---------------------------------------------------------------------


class RawWriter:
    """Appends raw rows for each finished repetition."""

    def __init__(self, out_dir: Path) -> None:
        self.out_dir = out_dir
        self._files = {}
        self._writers = {}
        for name, cols in ((RAW_SAMPLES, SAMPLE_COLUMNS), (RAW_BREAKDOWNS, BREAKDOWN_COLUMNS),
                           (RAW_COUNTERS, COUNTER_COLUMNS), (RESOURCES, RESOURCE_COLUMNS)):
            fh = open(out_dir / name, "w", newline="", encoding="utf-8")
            self._files[name] = fh
            self._writers[name] = csv.writer(fh, lineterminator="\n")
            self._writers[name].writerow(cols)

    def add(self, r: RunResult) -> None:
        w = self._writers[RAW_SAMPLES]
        for warm, groups in ((1, r.warmup_samples), (0, r.samples)):
            for role, samples in groups.items():
                for s in samples:
                    w.writerow([r.scenario, r.repetition, role, s.transaction_id, s.kind,
                                "" if s.l_sbi_us is None else s.l_sbi_us, int(s.success), warm])
        w = self._writers[RAW_BREAKDOWNS]
        for b in r.breakdowns:
            w.writerow([r.scenario, r.repetition, b["nf_role"], b["transaction_id"], b["side"], int(b["warmup"]),
                        b["delta_t_us"], b["handshake_us"], b["t_enc_us"], b["t_sig_us"], b["t_ver_us"]])
        w = self._writers[RAW_COUNTERS]
        for c in r.counters:
            w.writerow([r.scenario, r.repetition] + [c[k] for k in COUNTER_COLUMNS[2:]])
        w = self._writers[RESOURCES]
        for name, t, cpu, mem in r.resources:
            w.writerow([r.scenario, r.repetition, name, t, cpu, mem])
        for fh in self._files.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()


def host_info() -> dict:
    clock = time.get_clock_info("perf_counter")
    return {
        "clock": clock.implementation,
        "clock_resolution_s": clock.resolution,
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
        "mem_total_mb": round(psutil.virtual_memory().total / (1024 * 1024)),
    }


def config_hash(specs: Iterable[ScenarioSpec]) -> str:
    canon = json.dumps([s.to_dict() for s in specs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def run_benchmark(specs: Sequence[ScenarioSpec], out_dir, provider: CryptoProvider = DEFAULT_PROVIDER,
                  progress=None) -> "BenchReport":
    """Run every spec, persisting raw rows, then aggregate from the raw files."""
    check_provider(provider)
    if not specs:
        raise SpecError("no scenarios given")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise SpecError(f"scenario labels must be unique: {labels}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ws = Workspace(out)
    meta = {
        "version": __version__,
        "config_hash": config_hash(specs),
        "host": host_info(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "scenarios": [s.to_dict() for s in specs],
    }
    (out / RUN_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    raw = RawWriter(out)
    try:
        for spec in specs:
            for i in range(spec.repetitions):
                try:
                    result = run_repetition(spec, i, ws, provider)
                except HarnessError:
                    raise
                except Exception as exc:
                    raise HarnessError(f"{spec.label} repetition {i}: {exc!r}") from exc
                raw.add(result)
                if progress:
                    progress(spec, i)
    finally:
        raw.close()
    return load_report(out)


# --- aggregation --------------------------------------------------------------------------


def _ms(us: float) -> float:
    return us / 1000.0


def _stats_json(st: Optional[SummaryStats]) -> Optional[dict]:
    if st is None:
        return None
    out = {}
    for k, v in st.as_dict().items():
        if v is None or k == "n":
            out[k] = v
        else:
            out[k] = round(v, 6 if k == "cv" else 3)
    return out


def _summ_ms(values_us: Sequence[int]) -> Optional[dict]:
    return _stats_json(summarize([_ms(v) for v in values_us])) if values_us else None


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class BenchReport:
    summary: dict
    matrix: list[list]
    ca_impact: list[list]
    breakdown: list[list]

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


MATRIX_HEADER = ["scenario", "nf_role"] + [k.value + "_mean_ms" for k in KINDS]
CA_HEADER = ["ca_level", "scenario", "validation_median_ms", "l_sbi_median_ms", "delta_validation_ms",
             "delta_l_sbi_ms"]
BREAKDOWN_HEADER = ["scenario", "metric", "n", "median_ms", "q1_ms", "q3_ms", "mean_ms"]


def aggregate(meta: dict, samples: list[dict], breakdowns: list[dict], resources: list[dict]) -> BenchReport:
    """Build the report from raw rows (as read back from CSV)."""
    specs = [ScenarioSpec.from_dict(d) for d in meta["scenarios"]]
    measured = [r for r in samples if r["warmup"] == "0"]
    by_scenario = defaultdict(list)
    for r in measured:
        by_scenario[r["scenario"]].append(r)
    bd_measured = defaultdict(list)
    for b in breakdowns:
        if b["warmup"] == "0":
            bd_measured[b["scenario"]].append(b)

    scen_out = {}
    matrix = []
    breakdown_rows = []
    for spec in specs:
        rows = by_scenario.get(spec.label, [])
        ok = [r for r in rows if r["success"] == "1"]
        warnings = []
        per_role = {}
        for role in spec.nf_roles:
            per_role[role] = _summ_ms([int(r["l_sbi_us"]) for r in ok if r["nf_role"] == role])
        runs = defaultdict(list)
        for r in ok:
            runs[int(r["repetition"])].append(_ms(int(r["l_sbi_us"])))
        run_medians = [summarize(runs[k]).median for k in sorted(runs)]
        ci = None
        if len(run_medians) >= 2:
            lo, hi = ci_over_run_medians(run_medians)
            ci = [round(lo, 3), round(hi, 3)]
        else:
            warnings.append(f"{len(run_medians)} repetition(s): confidence interval over run medians omitted")
        failures = len(rows) - len(ok)
        if failures:
            warnings.append(f"{failures} failed transactions excluded from latency statistics")

        sides = {"client": defaultdict(list), "server": defaultdict(list)}
        for b in bd_measured.get(spec.label, []):
            d = sides[b["side"]]
            for k in ("delta_t_us", "handshake_us", "t_enc_us", "t_sig_us", "t_ver_us"):
                d[k].append(int(b[k]))
        proxy = {}
        for side, name in (("client", "L_Cli"), ("server", "L_Srv")):
            d = sides[side]
            if not d:
                continue
            metrics = {
                name: d["delta_t_us"],
                # only transactions that carried a handshake
                f"handshake_{side}": [v for v in d["handshake_us"] if v > 0],
                f"T_enc_{side}": d["t_enc_us"],
                f"T_sig_{side}": d["t_sig_us"],
                f"T_ver_{side}": d["t_ver_us"],
            }
            for metric, vals in metrics.items():
                st = _summ_ms(vals)
                proxy[metric] = st
                if st is not None:
                    breakdown_rows.append([spec.label, metric, st["n"], st["median"], st["q1"], st["q3"], st["mean"]])

        res = defaultdict(lambda: ([], []))
        for r in resources:
            if r["scenario"] == spec.label:
                kind = r["process"].rsplit("-", 1)[0] if r["process"].startswith("proxy") else r["process"]
                res[kind][0].append(float(r["cpu_percent"]))
                res[kind][1].append(float(r["mem_mb"]))
        resources_out = {
            k: {"cpu_percent_mean": round(summarize(c).mean, 3), "mem_mb_median": round(summarize(m).median, 3),
                "samples": len(c)}
            for k, (c, m) in sorted(res.items())
        }

        for role in spec.nf_roles:
            cells = []
            for kind in KINDS:
                vals = [_ms(int(r["l_sbi_us"])) for r in ok if r["nf_role"] == role and r["kind"] == kind.value]
                cells.append(round(summarize(vals).mean, 3) if vals else "")
            matrix.append([spec.label, role] + cells)

        scen_out[spec.label] = {
            "spec": spec.to_dict(),
            "measured_samples": len(rows),
            "failed_samples": failures,
            "l_sbi": {"all": _summ_ms([int(r["l_sbi_us"]) for r in ok]), "by_role": per_role},
            "run_medians": {
                "values_ms": [round(m, 3) for m in run_medians],
                "stats": _stats_json(summarize(run_medians)) if run_medians else None,
                "ci95_ms": ci,
            },
            "proxy": proxy,
            "resources": resources_out,
            "warnings": warnings,
        }

    ca_rows = _ca_impact(specs, by_scenario, bd_measured)
    summary = {
        "metadata": {k: meta[k] for k in ("version", "config_hash", "host", "started_at")},
        "scenarios": scen_out,
        "matrix": [dict(zip(MATRIX_HEADER, row)) for row in matrix],
        "ca_impact": [dict(zip(CA_HEADER, row)) for row in ca_rows],
    }
    return BenchReport(summary, matrix, ca_rows, breakdown_rows)


def _ca_impact(specs, by_scenario, bd_measured) -> list[list]:
    """Validation (verify time summed over both proxies per transaction) and
    L_SBI medians per CA level, with deltas against the lowest level."""
    levels = []
    for spec in specs:
        if spec.ca_level is None or not spec.sidecar:
            continue
        per_txn = defaultdict(int)
        for b in bd_measured.get(spec.label, []):
            per_txn[b["transaction_id"]] += int(b["t_ver_us"])
        ok = [int(r["l_sbi_us"]) for r in by_scenario.get(spec.label, []) if r["success"] == "1"]
        if not per_txn or not ok:
            continue
        v = round(summarize([_ms(x) for x in per_txn.values()]).median, 3)
        l = round(summarize([_ms(x) for x in ok]).median, 3)
        levels.append((int(spec.ca_level), spec.label, v, l))
    if not levels:
        return []
    levels.sort()
    _, _, base_v, base_l = levels[0]
    return [[f"ML-DSA-{lvl}", label, v, l, round(v - base_v, 3), round(l - base_l, 3)]
            for lvl, label, v, l in levels]


def load_report(out_dir) -> BenchReport:
    """Re-aggregate from the raw files in ``out_dir``."""
    out = Path(out_dir)
    try:
        meta = json.loads((out / RUN_META).read_text())
    except FileNotFoundError:
        raise HarnessError(f"{out / RUN_META} not found; is this a benchmark output directory?") from None
    return aggregate(meta, _read_csv(out / RAW_SAMPLES), _read_csv(out / RAW_BREAKDOWNS), _read_csv(out / RESOURCES))


class IoFailure(HarnessError, OSError):
    pass


def emit_report(report: BenchReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / "summary.json"
        p.write_text(report.summary_json(), encoding="utf-8")
        written.append(p)
        for name, header, rows in (("matrix.csv", MATRIX_HEADER, report.matrix),
                                   ("ca_impact.csv", CA_HEADER, report.ca_impact),
                                   ("breakdown.csv", BREAKDOWN_HEADER, report.breakdown)):
            p = out / name
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            written.append(p)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written
