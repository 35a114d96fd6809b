"""Throughput/latency measurement and compute cost arithmetic.

Units are decimal: 1 GB = 10**9 bytes, 1 Gb = 10**9 bits.  Costs are kept
at full float precision and rounded half-up to cents only for display;
rounding the amortized workstation rate first changes the Local total by a
cent (3.52 instead of 3.53).
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import socket
import socketserver
import statistics
import threading
import time
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Optional

from bidsbatch.errors import BidsBatchError

HOURS_PER_YEAR = 8760
DEFAULT_PAYLOAD = 64
CI_BYTES_PER_TRIAL = 16 * 1024 * 1024
CI_TRIALS = 20
FULL_BYTES_PER_TRIAL = 10**9
FULL_TRIALS = 100


class BenchError(BidsBatchError):
    pass


class Unwritable(BenchError):
    pass


class InsufficientSpace(BenchError):
    pass


class Unreachable(BenchError):
    pass


class Timeout(BenchError):
    pass


def round_half_up(value: float, places: int) -> Decimal:
    quantum = Decimal(1).scaleb(-places)
    return Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP)


def _stats(samples) -> tuple[float, float]:
    mean = statistics.fmean(samples)
    stdev = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return mean, stdev


def gbps(n_bytes: int, seconds: float) -> float:
    """Decimal gigabits per second."""
    return n_bytes * 8 / (seconds * 1e9)


@dataclass(frozen=True)
class ThroughputResult:
    mean_gbps: float
    stdev_gbps: float
    n: int
    bytes_per_trial: int
    trials: tuple = ()

    @classmethod
    def from_samples(cls, samples, bytes_per_trial: int) -> "ThroughputResult":
        mean, stdev = _stats(samples)
        return cls(mean, stdev, len(samples), bytes_per_trial, tuple(samples))


@dataclass(frozen=True)
class LatencyResult:
    mean_ms: float
    stdev_ms: float
    n: int
    payload_bytes: int = DEFAULT_PAYLOAD
    trials: tuple = ()

    @classmethod
    def from_samples(cls, samples, payload_bytes: int) -> "LatencyResult":
        mean, stdev = _stats(samples)
        return cls(mean, stdev, len(samples), payload_bytes, tuple(samples))


def _write_random(path: Path, n_bytes: int) -> None:
    chunk = 1 << 20
    with open(path, "wb") as fh:
        remaining = n_bytes
        while remaining:
            k = min(chunk, remaining)
            fh.write(os.urandom(k))
            remaining -= k


def measure_throughput(
    src_dir: str | os.PathLike,
    dst_dir: str | os.PathLike,
    bytes_per_trial: int = CI_BYTES_PER_TRIAL,
    n_trials: int = CI_TRIALS,
    *,
    clock: Callable[[], float] = time.perf_counter,
) -> ThroughputResult:
    """Time ``n_trials`` copies of a fresh random file from src_dir to dst_dir.

    Each copy is fsync'ed so the timing covers the write reaching storage.
    """
    if bytes_per_trial < 1 or n_trials < 1:
        raise ValueError("bytes_per_trial and n_trials must be >= 1")
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    for d in (src_dir, dst_dir):
        try:
            free = shutil.disk_usage(d).free
        except OSError as exc:
            raise Unwritable(f"{d}: {exc.strerror or exc}") from exc
        if free < bytes_per_trial:
            raise InsufficientSpace(f"{d}: {free} bytes free, {bytes_per_trial} needed")

    samples = []
    for i in range(n_trials):
        src = src_dir / f".bidsbatch-throughput-{os.getpid()}-{i}.src"
        dst = dst_dir / f".bidsbatch-throughput-{os.getpid()}-{i}.dst"
        try:
            _write_random(src, bytes_per_trial)
            start = clock()
            with open(src, "rb") as fin, open(dst, "wb") as fout:
                shutil.copyfileobj(fin, fout, 1 << 20)
                fout.flush()
                os.fsync(fout.fileno())
            elapsed = clock() - start
        except OSError as exc:
            raise Unwritable(f"throughput trial {i} failed: {exc.strerror or exc}") from exc
        finally:
            for p in (src, dst):
                try:
                    p.unlink()
                except FileNotFoundError:
                    pass
        samples.append(gbps(bytes_per_trial, max(elapsed, 1e-9)))
    return ThroughputResult.from_samples(samples, bytes_per_trial)


class _EchoHandler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            data = self.request.recv(65536)
            if not data:
                return
            if self.server.delay_s:
                time.sleep(self.server.delay_s)
            self.request.sendall(data)


class EchoServer(socketserver.TCPServer):
    """TCP echo responder; serves one client at a time.

    Use as a context manager to run it on a background thread::

        with EchoServer(delay_s=0.001) as server:
            measure_latency(server.endpoint)
    """

    allow_reuse_address = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, delay_s: float = 0.0):
        super().__init__((host, port), _EchoHandler)
        self.delay_s = delay_s
        self._thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.server_address[:2]

    def __enter__(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()


def measure_latency(
    endpoint: tuple[str, int],
    payload_bytes: int = DEFAULT_PAYLOAD,
    n_trials: int = 100,
    *,
    timeout: float = 5.0,
) -> LatencyResult:
    """Round-trip time of ``payload_bytes`` messages to an echo responder, in ms."""
    if payload_bytes < 1 or n_trials < 1:
        raise ValueError("payload_bytes and n_trials must be >= 1")
    payload = bytes(range(256)) * (payload_bytes // 256 + 1)
    payload = payload[:payload_bytes]
    try:
        sock = socket.create_connection(endpoint, timeout=timeout)
    except socket.timeout as exc:
        raise Timeout(f"connecting to {endpoint} timed out") from exc
    except OSError as exc:
        raise Unreachable(f"{endpoint}: {exc.strerror or exc}") from exc

    samples = []
    with sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        for _ in range(n_trials):
            start = time.perf_counter()
            try:
                sock.sendall(payload)
                received = 0
                while received < payload_bytes:
                    chunk = sock.recv(payload_bytes - received)
                    if not chunk:
                        raise Unreachable(f"{endpoint} closed the connection")
                    received += len(chunk)
            except socket.timeout as exc:
                raise Timeout(f"no echo from {endpoint} within {timeout}s") from exc
            samples.append((time.perf_counter() - start) * 1000.0)
    return LatencyResult.from_samples(samples, payload_bytes)


@dataclass(frozen=True)
class CostScenario:
    label: str
    cost_per_hour: float
    n_jobs: int
    avg_minutes_per_job: float

    def __post_init__(self):
        if self.cost_per_hour < 0 or self.avg_minutes_per_job < 0 or self.n_jobs < 0:
            raise ValueError("cost inputs must be non-negative")


@dataclass(frozen=True)
class CostResult:
    total_dollars: float

    def display(self) -> str:
        return str(round_half_up(self.total_dollars, 2))


def compute_job_cost(scenario: CostScenario) -> CostResult:
    hours = scenario.n_jobs * scenario.avg_minutes_per_job / 60
    return CostResult(hours * scenario.cost_per_hour)


def amortized_hourly_rate(price_dollars: float, lifetime_years: float) -> float:
    if price_dollars <= 0 or lifetime_years <= 0:
        raise ValueError("price and lifetime must be positive")
    return price_dollars / (lifetime_years * HOURS_PER_YEAR)


def storage_cost_annual(tb: float, rate_per_tb_year: float) -> float:
    if tb < 0 or rate_per_tb_year < 0:
        raise ValueError("storage size and rate must be non-negative")
    return tb * rate_per_tb_year


def archive_storage_cost(gb: float, rate_per_gb_month: float, months: int = 12) -> float:
    """Cold-archive (Glacier-style) cost billed per GB-month."""
    if gb < 0 or rate_per_gb_month < 0 or months < 0:
        raise ValueError("storage size, rate and months must be non-negative")
    return gb * rate_per_gb_month * months


def reference_scenarios(n_jobs: int = 6) -> list[CostScenario]:
    """Cost inputs of the published three-environment Freesurfer comparison."""
    return [
        CostScenario("HPC", 0.0096, n_jobs, 375.5),
        CostScenario("Cloud", 0.1856, n_jobs, 355.2),
        CostScenario("Local", amortized_hourly_rate(4000, 5), n_jobs, 386.0),
    ]


@dataclass(frozen=True)
class BenchRow:
    label: str
    scenario: CostScenario
    throughput: Optional[ThroughputResult] = None
    latency: Optional[LatencyResult] = None


DASH = "-"
METRICS = (
    ("throughput_gbps", "Average data throughput from storage to compute (Gb/s ± sample stdev)"),
    ("latency_ms", "Round-trip latency, {payload} bytes (ms ± sample stdev)"),
    ("cost_per_hour", "Cost per hr compute time: single instance (dollars)"),
    ("avg_minutes", "Average job runtime (mins)"),
    ("total_cost", "Total overhead cost to run jobs (dollars)"),
)


def comparison_table(rows) -> tuple[str, str]:
    """Render rows as an aligned text table and as ``metric,label,value,stdev`` CSV."""
    rows = list(rows)
    if not rows:
        raise ValueError("comparison_table needs at least one row")
    have_tp = any(r.throughput for r in rows)
    have_lat = any(r.latency for r in rows)
    payload = next((r.latency.payload_bytes for r in rows if r.latency), DEFAULT_PAYLOAD)

    table: list[list[str]] = []
    records = []
    for key, title in METRICS:
        if key == "throughput_gbps" and not have_tp or key == "latency_ms" and not have_lat:
            continue
        cells = [title.format(payload=payload)]
        for r in rows:
            s = r.scenario
            if key == "throughput_gbps":
                m = r.throughput
                cells.append(f"{m.mean_gbps:.2f} ± {m.stdev_gbps:.2f}" if m else DASH)
                if m:
                    records.append((key, r.label, m.mean_gbps, m.stdev_gbps))
            elif key == "latency_ms":
                m = r.latency
                cells.append(f"{m.mean_ms:.2f} ± {m.stdev_ms:.2f}" if m else DASH)
                if m:
                    records.append((key, r.label, m.mean_ms, m.stdev_ms))
            elif key == "cost_per_hour":
                cells.append(str(round_half_up(s.cost_per_hour, 4)))
                records.append((key, r.label, s.cost_per_hour, None))
            elif key == "avg_minutes":
                cells.append(f"{s.avg_minutes_per_job:.1f}")
                records.append((key, r.label, s.avg_minutes_per_job, None))
            else:
                cost = compute_job_cost(s)
                cells.append(cost.display())
                records.append((key, r.label, cost.total_dollars, None))
        table.append(cells)

    header = ["Metric", *(r.label for r in rows)]
    widths = [max(len(line[i]) for line in [header, *table]) for i in range(len(header))]

    def fmt(line):
        return "  ".join(
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths))
        ).rstrip()

    text = "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, table)]) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "label", "value", "stdev"))
    for metric, label, value, stdev in records:
        writer.writerow((metric, label, repr(value), "" if stdev is None else repr(stdev)))
    return text, buf.getvalue()


def parse_comparison_csv(text: str) -> list[tuple]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        (r["metric"], r["label"], float(r["value"]), float(r["stdev"]) if r["stdev"] else None)
        for r in reader
    ]
