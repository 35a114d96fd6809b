"""Checksummed transfers and provenance records.

Every byte that moves between the archive and a compute node goes through
:func:`transfer_verified`, which digests the source while copying, re-reads
the destination and removes it if the two digests disagree.  Finished runs
are sealed with a ``provenance.json`` that lists inputs and outputs with
their SHA-256 digests; :func:`is_complete` re-verifies those digests, so a
derivative directory only counts as done when its outputs are intact.

The module doubles as the staging command used inside generated job
scripts::

    python -m bidsbatch.integrity stage-in --receipts R SRC DST
    python -m bidsbatch.integrity stage-out --receipts R SRC_DIR DST_DIR
    python -m bidsbatch.integrity provenance --output-dir D ...
"""

from __future__ import annotations

import argparse
import enum
import getpass
import hashlib
import json
import os
import shutil
import socket
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from bidsbatch.errors import BidsBatchError

DIGEST_ALGORITHM = "sha256"
PROVENANCE_NAME = "provenance.json"
CHUNK_SIZE = 1 << 20
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class IntegrityError(BidsBatchError):
    pass


class Unreadable(IntegrityError):
    pass


class Unwritable(IntegrityError):
    pass


class IntegrityMismatch(IntegrityError):
    """Destination digest differs from source digest after a copy."""


class OutputsMissing(IntegrityError):
    pass


class OutputDigestMismatch(IntegrityError):
    pass


class CompletionState(str, enum.Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"
    ABSENT = "absent"


def digest_file(path: str | os.PathLike) -> str:
    """Return the hex SHA-256 digest of a regular file, read in chunks."""
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(CHUNK_SIZE), b""):
                h.update(chunk)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise Unreadable(f"cannot read {path}: {exc.strerror or exc}") from exc
    return h.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(value: str) -> datetime:
    return datetime.strptime(value, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class TransferReceipt:
    src: str
    dst: str
    digest: str
    bytes: int
    elapsed_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def _remove_quietly(path: Path) -> None:
    try:
        path.unlink()
    except FileNotFoundError:
        pass


def transfer_verified(
    src: str | os.PathLike,
    dst: str | os.PathLike,
    *,
    after_write: Callable[[Path], None] | None = None,
) -> TransferReceipt:
    """Copy ``src`` to ``dst`` and prove the copy is byte-identical.

    The source digest is computed during the copy; the destination is then
    re-read from disk.  On mismatch the destination is deleted and
    :class:`IntegrityMismatch` is raised.

    ``after_write`` is called with the destination path after the data has
    been flushed and before verification.  It exists for fault injection.
    """
    src, dst = Path(src), Path(dst)
    start = time.perf_counter()
    try:
        fin = open(src, "rb")
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise Unreadable(f"cannot read {src}: {exc.strerror or exc}") from exc

    h = hashlib.sha256()
    n_bytes = 0
    with fin:
        try:
            dst.parent.mkdir(parents=True, exist_ok=True)
            fout = open(dst, "wb")
        except OSError as exc:
            raise Unwritable(f"cannot write {dst}: {exc.strerror or exc}") from exc
        try:
            with fout:
                for chunk in iter(lambda: fin.read(CHUNK_SIZE), b""):
                    h.update(chunk)
                    fout.write(chunk)
                    n_bytes += len(chunk)
                fout.flush()
                os.fsync(fout.fileno())
        except OSError as exc:
            _remove_quietly(dst)
            raise Unwritable(f"write to {dst} failed: {exc.strerror or exc}") from exc

    src_digest = h.hexdigest()
    if after_write is not None:
        after_write(dst)
    try:
        dst_digest = digest_file(dst)
    except Unreadable:
        _remove_quietly(dst)
        raise
    if dst_digest != src_digest:
        _remove_quietly(dst)
        raise IntegrityMismatch(
            f"checksum mismatch copying {src} -> {dst}: {src_digest} != {dst_digest}"
        )
    elapsed = max(time.perf_counter() - start, 1e-9)
    return TransferReceipt(str(src), str(dst), src_digest, n_bytes, elapsed)


@dataclass(frozen=True)
class FileEntry:
    path: str
    digest: str


@dataclass(frozen=True)
class ProvenanceRecord:
    """Who ran what, when, on which inputs, producing which outputs.

    Output paths are relative to the derivative directory holding the
    record; input paths are whatever the caller chose (dataset-relative in
    generated jobs).
    """

    pipeline_name: str
    pipeline_version: str
    container_digest: str
    started_at: str
    finished_at: str
    user: str
    hostname: str
    inputs: tuple[FileEntry, ...]
    outputs: tuple[FileEntry, ...]
    digest_algorithm: str = DIGEST_ALGORITHM

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("provenance requires at least one input")
        if not self.outputs:
            raise ValueError("provenance requires at least one output")
        if any(Path(o.path).name == PROVENANCE_NAME for o in self.outputs):
            raise ValueError(f"{PROVENANCE_NAME} cannot list itself as an output")
        if parse_timestamp(self.finished_at) < parse_timestamp(self.started_at):
            raise ValueError("finished_at precedes started_at")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = [asdict(e) for e in self.inputs]
        d["outputs"] = [asdict(e) for e in self.outputs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProvenanceRecord":
        return cls(
            pipeline_name=d["pipeline_name"],
            pipeline_version=d["pipeline_version"],
            container_digest=d["container_digest"],
            started_at=d["started_at"],
            finished_at=d["finished_at"],
            user=d["user"],
            hostname=d["hostname"],
            inputs=tuple(FileEntry(e["path"], e["digest"]) for e in d["inputs"]),
            outputs=tuple(FileEntry(e["path"], e["digest"]) for e in d["outputs"]),
            digest_algorithm=d.get("digest_algorithm", DIGEST_ALGORITHM),
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def current_user() -> str:
    try:
        return getpass.getuser()
    except (KeyError, OSError):
        return str(os.getuid())


def write_provenance(record: ProvenanceRecord, output_dir: str | os.PathLike) -> Path:
    """Verify the listed outputs, then atomically write ``provenance.json``."""
    output_dir = Path(output_dir)
    missing = [o.path for o in record.outputs if not (output_dir / o.path).is_file()]
    if missing:
        raise OutputsMissing(f"outputs missing in {output_dir}: {', '.join(missing)}")
    for o in record.outputs:
        actual = digest_file(output_dir / o.path)
        if actual != o.digest:
            raise OutputDigestMismatch(f"{o.path}: expected {o.digest}, found {actual}")

    target = output_dir / PROVENANCE_NAME
    fd, tmp = tempfile.mkstemp(prefix=".provenance.", suffix=".tmp", dir=output_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(canonical_json(record.to_dict()))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        _remove_quietly(Path(tmp))
        raise
    return target


def read_provenance(output_dir: str | os.PathLike) -> ProvenanceRecord:
    with open(Path(output_dir) / PROVENANCE_NAME, encoding="utf-8") as fh:
        return ProvenanceRecord.from_dict(json.load(fh))


def is_complete(output_dir: str | os.PathLike) -> CompletionState:
    output_dir = Path(output_dir)
    if not output_dir.is_dir() or not any(output_dir.iterdir()):
        return CompletionState.ABSENT
    try:
        record = read_provenance(output_dir)
    except (OSError, ValueError, KeyError, TypeError):
        return CompletionState.PARTIAL
    for o in record.outputs:
        try:
            if digest_file(output_dir / o.path) != o.digest:
                return CompletionState.PARTIAL
        except Unreadable:
            return CompletionState.PARTIAL
    return CompletionState.COMPLETE


def iter_files(root: Path) -> Iterable[Path]:
    """Regular files under ``root`` in sorted order."""
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            yield Path(dirpath) / name


# -- staging command used by generated job scripts --------------------------


def _append_receipt(path: str, receipt: TransferReceipt) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(receipt.to_dict(), sort_keys=True) + "\n")


def _read_receipts(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def stage_out(
    src_dir: Path,
    dst_dir: Path,
    *,
    transfer: Callable[[Path, Path], TransferReceipt] = transfer_verified,
) -> list[TransferReceipt]:
    """Copy every file of ``src_dir`` into ``dst_dir``; all-or-nothing.

    ``dst_dir`` must be absent or empty.  On failure every file and
    directory created here is removed again.
    """
    if dst_dir.exists() and any(dst_dir.iterdir()):
        raise Unwritable(f"refusing to stage out into non-empty {dst_dir}")
    files = list(iter_files(src_dir))
    if not files:
        raise OutputsMissing(f"no outputs produced in {src_dir}")

    # remember the first missing ancestor so a failed stage-out leaves no trace
    created_root = None
    for parent in [dst_dir, *dst_dir.parents]:
        if parent.exists():
            break
        created_root = parent
    receipts = []
    try:
        for f in files:
            receipts.append(transfer(f, dst_dir / f.relative_to(src_dir)))
    except BaseException:
        for r in receipts:
            _remove_quietly(Path(r.dst))
        if created_root is not None:
            shutil.rmtree(created_root, ignore_errors=True)
        raise
    return receipts


def _cmd_stage_in(args, transfer) -> int:
    receipt = transfer(Path(args.src), Path(args.dst))
    _append_receipt(args.receipts, receipt)
    return 0


def _cmd_stage_out(args, transfer) -> int:
    receipts = stage_out(Path(args.src_dir), Path(args.dst_dir), transfer=transfer)
    for r in receipts:
        _append_receipt(args.receipts, r)
    return 0


def _cmd_provenance(args, transfer) -> int:
    dataset_root = Path(args.dataset_root)
    output_dir = Path(args.output_dir)
    inputs = tuple(
        FileEntry(Path(os.path.relpath(r["src"], dataset_root)).as_posix(), r["digest"])
        for r in _read_receipts(args.inputs)
    )
    outputs = tuple(
        FileEntry(Path(os.path.relpath(r["dst"], output_dir)).as_posix(), r["digest"])
        for r in _read_receipts(args.outputs)
    )
    record = ProvenanceRecord(
        pipeline_name=args.pipeline,
        pipeline_version=args.version,
        container_digest=args.container_digest,
        started_at=args.started_at,
        finished_at=utc_now(),
        user=current_user(),
        hostname=socket.gethostname(),
        inputs=inputs,
        outputs=tuple(sorted(outputs, key=lambda e: e.path)),
    )
    write_provenance(record, output_dir)
    return 0


def _cmd_digest(args, transfer) -> int:
    for p in args.paths:
        print(f"{digest_file(p)}  {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m bidsbatch.integrity")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stage-in", help="verified copy of one input file")
    s.add_argument("--receipts", required=True)
    s.add_argument("src")
    s.add_argument("dst")
    s.set_defaults(func=_cmd_stage_in)

    s = sub.add_parser("stage-out", help="verified copy of an output tree")
    s.add_argument("--receipts", required=True)
    s.add_argument("src_dir")
    s.add_argument("dst_dir")
    s.set_defaults(func=_cmd_stage_out)

    s = sub.add_parser("provenance", help="write provenance.json for staged outputs")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--dataset-root", required=True)
    s.add_argument("--pipeline", required=True)
    s.add_argument("--version", required=True)
    s.add_argument("--container-digest", required=True)
    s.add_argument("--started-at", required=True)
    s.add_argument("--inputs", required=True, help="stage-in receipts file")
    s.add_argument("--outputs", required=True, help="stage-out receipts file")
    s.set_defaults(func=_cmd_provenance)

    s = sub.add_parser("digest")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=_cmd_digest)
    return p


def main(argv=None, *, transfer=transfer_verified) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, transfer)
    except IntegrityError as exc:
        kind = type(exc).__name__
        print(f"ERROR {args.command} {kind}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"ERROR {args.command} {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
