"""Storage and queue status queries for operators."""

from __future__ import annotations

import csv
import io
import logging
import os
import re
import stat
from dataclasses import asdict, dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

QUEUE_STATES = ("pending", "running", "done", "failed")
# scheduler state name -> normalized state
_STATE_MAP = {
    "PENDING": "pending",
    "PD": "pending",
    "REQUEUED": "pending",
    "RUNNING": "running",
    "R": "running",
    "CONFIGURING": "running",
    "CF": "running",
    "COMPLETING": "running",
    "CG": "running",
    "COMPLETED": "done",
    "CD": "done",
    "FAILED": "failed",
    "F": "failed",
    "TIMEOUT": "failed",
    "TO": "failed",
    "CANCELLED": "failed",
    "CA": "failed",
    "NODE_FAIL": "failed",
    "NF": "failed",
    "OUT_OF_MEMORY": "failed",
    "OOM": "failed",
}
_JOB_ID = re.compile(r"^(\d+)(?:_(\d+|\[[^\]]+\]))?$")


@dataclass(frozen=True)
class StorageRow:
    dataset_name: str
    total_bytes: int
    file_count: int
    raw_image_count: int


@dataclass(frozen=True)
class StorageReport:
    rows: tuple

    @property
    def total_bytes(self) -> int:
        return sum(r.total_bytes for r in self.rows)

    @property
    def file_count(self) -> int:
        return sum(r.file_count for r in self.rows)

    @property
    def raw_image_count(self) -> int:
        return sum(r.raw_image_count for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "totals": {
                "total_bytes": self.total_bytes,
                "file_count": self.file_count,
                "raw_image_count": self.raw_image_count,
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("dataset", "total_bytes", "file_count", "raw_image_count"))
        for r in self.rows:
            w.writerow((r.dataset_name, r.total_bytes, r.file_count, r.raw_image_count))
        w.writerow(("TOTAL", self.total_bytes, self.file_count, self.raw_image_count))
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'dataset':<24} {'size':>12} {'files':>8} {'raw images':>10}"]
        for r in [*self.rows, StorageRow("TOTAL", self.total_bytes, self.file_count, self.raw_image_count)]:
            lines.append(
                f"{r.dataset_name:<24} {human_bytes(r.total_bytes):>12} {r.file_count:>8} {r.raw_image_count:>10}"
            )
        return "\n".join(lines) + "\n"


def human_bytes(n: int) -> str:
    if n < 1000:
        return f"{n} B"
    value = float(n)
    for unit in ("kB", "MB", "GB", "TB"):
        value /= 1000
        if value < 1000 or unit == "TB":
            break
    return f"{value:.1f} {unit}"


def _real_stat(path: Path):
    """Stat the file a directory entry stands for, following one link level."""
    st = path.lstat()
    if stat.S_ISLNK(st.st_mode):
        target = Path(os.readlink(path))
        if not target.is_absolute():
            target = path.parent / target
        try:
            st = target.lstat()
        except OSError:
            return None
    return st if stat.S_ISREG(st.st_mode) else None


def _dataset_row(dataset: Path) -> StorageRow:
    seen = set()
    total = files = raw_images = 0
    for dirpath, dirnames, filenames in os.walk(dataset):
        dirnames.sort()
        rel_dir = Path(dirpath).relative_to(dataset)
        raw_side = bool(rel_dir.parts) and rel_dir.parts[0].startswith("sub-")
        for name in sorted(filenames):
            st = _real_stat(Path(dirpath) / name)
            if st is None:
                logger.warning("WARN %s unresolvable", Path(dirpath) / name)
                continue
            if raw_side and name.endswith(".nii.gz"):
                raw_images += 1
            key = (st.st_dev, st.st_ino)
            if key in seen:
                continue
            seen.add(key)
            total += st.st_size
            files += 1
    return StorageRow(dataset.name, total, files, raw_images)


def storage_report(archive_root: str | os.PathLike) -> StorageReport:
    """One row per dataset directory under ``archive_root`` (hidden dirs skipped).

    Links are resolved once and each real file is counted once per dataset.
    """
    root = Path(archive_root)
    if not root.is_dir():
        raise FileNotFoundError(f"archive root not found: {root}")
    datasets = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    return StorageReport(tuple(_dataset_row(d) for d in datasets))


@dataclass(frozen=True)
class QueueRow:
    job_id: str
    state: str
    pipeline_name: str
    array_index: int | None


@dataclass(frozen=True)
class QueueReport:
    rows: tuple
    source: str
    warnings: tuple = ()

    def counts(self) -> dict:
        return {s: sum(1 for r in self.rows if r.state == s) for s in QUEUE_STATES}

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "rows": [asdict(r) for r in self.rows],
            "counts": self.counts(),
            "warnings": list(self.warnings),
        }

    def to_table(self) -> str:
        lines = [f"{'job_id':<16} {'state':<8} {'index':>5}  pipeline"]
        for r in self.rows:
            idx = "" if r.array_index is None else str(r.array_index)
            lines.append(f"{r.job_id:<16} {r.state:<8} {idx:>5}  {r.pipeline_name}")
        c = self.counts()
        lines.append(", ".join(f"{c[s]} {s}" for s in QUEUE_STATES))
        return "\n".join(lines) + "\n"


def queue_from_sim(report, t: int, pipeline_name: str, job_id: str = "sim") -> QueueReport:
    """Snapshot of a simulated run at virtual time ``t``."""
    rows = tuple(
        QueueRow(f"{job_id}_{i}", state, pipeline_name, i)
        for i, state in sorted(report.state_at(t).items())
    )
    return QueueReport(rows, "sim")


def _expand_indices(spec: str) -> list[int]:
    body = spec.strip("[]").split("%", 1)[0]
    out = []
    for part in body.split(","):
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def parse_queue_text(text: str) -> QueueReport:
    """Parse ``squeue -h -o "%i %T %j"`` style lines: JOBID STATE NAME.

    Pending array ranges such as ``1234_[3-5%2]`` expand to one row per
    index.  Unknown states become ``pending`` with a warning; malformed
    lines are skipped with a warning.
    """
    rows, warnings = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].upper() == "JOBID":
            continue
        m = _JOB_ID.match(fields[0]) if len(fields) >= 3 else None
        if m is None:
            warnings.append(f"line {lineno}: malformed queue line skipped: {line.strip()!r}")
            continue
        base, idx = m.group(1), m.group(2)
        raw_state = fields[1].upper()
        state = _STATE_MAP.get(raw_state)
        if state is None:
            warnings.append(f"line {lineno}: unknown state {fields[1]!r} mapped to pending")
            state = "pending"
        name = " ".join(fields[2:])
        try:
            indices = [None] if idx is None else _expand_indices(idx)
        except ValueError:
            warnings.append(f"line {lineno}: bad array index {idx!r}, line skipped")
            continue
        for i in indices:
            job_id = base if i is None else f"{base}_{i}"
            rows.append(QueueRow(job_id, state, name, i))
    for w in warnings:
        logger.warning("WARN %s", w)
    return QueueReport(tuple(rows), "external-adapter", tuple(warnings))
