"""BIDS filename grammar, derivative layout and dataset indexing.

Only the subset of BIDS the archive stores is understood: T1w and dwi scans
named with the ``sub``, ``ses``, ``acq``, ``dir`` and ``run`` entities, in
that order.  Anything else is a :class:`MalformedName`.
"""

from __future__ import annotations

import json
import logging
import os
import re
import stat
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Optional

from bidsbatch.errors import BidsBatchError
from bidsbatch.integrity import CompletionState, is_complete, read_provenance

logger = logging.getLogger(__name__)

SUFFIXES = ("T1w", "dwi")
EXTENSIONS = (".nii.gz", ".json", ".bval", ".bvec")
DWI_ONLY_EXTENSIONS = (".bval", ".bvec")
DATATYPE = {"T1w": "anat", "dwi": "dwi"}
# (entity key, EntitySet attribute) in mandatory filename order
ENTITY_ORDER = (
    ("sub", "subject"),
    ("ses", "session"),
    ("acq", "acquisition"),
    ("dir", "direction"),
    ("run", "run"),
)

_LABEL = re.compile(r"[A-Za-z0-9]+")
_RUN = re.compile(r"[1-9][0-9]*")
_PIPELINE = re.compile(r"[A-Za-z0-9_-]+")


class BidsError(BidsBatchError):
    pass


class MalformedName(BidsError):
    pass


class InvalidPipelineName(BidsError):
    pass


class RootNotFound(BidsError):
    pass


class NotADataset(BidsError):
    pass


def is_label(value) -> bool:
    return isinstance(value, str) and _LABEL.fullmatch(value) is not None


@dataclass(frozen=True)
class EntitySet:
    subject: str
    suffix: str
    extension: str
    session: Optional[str] = None
    acquisition: Optional[str] = None
    direction: Optional[str] = None
    run: Optional[int] = None

    def __post_init__(self):
        for _, attr in ENTITY_ORDER[:-1]:
            value = getattr(self, attr)
            if value is None and attr != "subject":
                continue
            if not is_label(value):
                raise ValueError(f"invalid {attr} label: {value!r}")
        if self.run is not None and (
            isinstance(self.run, bool) or not isinstance(self.run, int) or self.run < 1
        ):
            raise ValueError(f"run must be a positive integer, got {self.run!r}")
        if self.suffix not in SUFFIXES:
            raise ValueError(f"unsupported suffix {self.suffix!r}")
        if self.extension not in EXTENSIONS:
            raise ValueError(f"unsupported extension {self.extension!r}")
        if self.extension in DWI_ONLY_EXTENSIONS and self.suffix != "dwi":
            raise ValueError(f"{self.extension} is only valid for dwi scans")

    @property
    def datatype(self) -> str:
        return DATATYPE[self.suffix]

    def with_extension(self, extension: str) -> "EntitySet":
        return EntitySet(
            subject=self.subject,
            suffix=self.suffix,
            extension=extension,
            session=self.session,
            acquisition=self.acquisition,
            direction=self.direction,
            run=self.run,
        )

    def relative_path(self) -> str:
        """Raw-side location, e.g. ``sub-01/ses-02/anat/sub-01_ses-02_T1w.nii.gz``."""
        parts = [f"sub-{self.subject}"]
        if self.session is not None:
            parts.append(f"ses-{self.session}")
        parts += [self.datatype, format_bids_name(self)]
        return "/".join(parts)


def format_bids_name(entities: EntitySet) -> str:
    tokens = []
    for key, attr in ENTITY_ORDER:
        value = getattr(entities, attr)
        if value is not None:
            tokens.append(f"{key}-{value}")
    tokens.append(entities.suffix)
    return "_".join(tokens) + entities.extension


def parse_bids_name(filename: str) -> EntitySet:
    """Parse a bare BIDS filename into an :class:`EntitySet`.

    >>> parse_bids_name("sub-01_ses-02_run-1_T1w.nii.gz").run
    1
    """
    if not filename or "/" in filename or "\\" in filename:
        raise MalformedName(f"{filename!r}: not a bare filename")
    for ext in EXTENSIONS:
        if filename.endswith(ext):
            stem = filename[: -len(ext)]
            break
    else:
        raise MalformedName(f"{filename!r}: unknown extension")

    tokens = stem.split("_")
    suffix = tokens.pop()
    if suffix not in SUFFIXES:
        raise MalformedName(f"{filename!r}: unknown suffix {suffix!r}")
    if not tokens or not tokens[0].startswith("sub-"):
        raise MalformedName(f"{filename!r}: must start with sub-<label>")

    values: dict = {}
    position = 0
    for token in tokens:
        key, sep, value = token.partition("-")
        if not sep:
            raise MalformedName(f"{filename!r}: entity {token!r} lacks a value")
        keys = [k for k, _ in ENTITY_ORDER]
        if key not in keys:
            raise MalformedName(f"{filename!r}: unsupported entity {key!r}")
        idx = keys.index(key)
        if idx < position:
            raise MalformedName(f"{filename!r}: entity {key!r} out of order or repeated")
        position = idx + 1
        attr = ENTITY_ORDER[idx][1]
        if key == "run":
            if not _RUN.fullmatch(value):
                raise MalformedName(f"{filename!r}: run must be a positive integer without padding")
            values[attr] = int(value)
        else:
            if not is_label(value):
                raise MalformedName(f"{filename!r}: invalid {key} label {value!r}")
            values[attr] = value

    try:
        return EntitySet(suffix=suffix, extension=ext, **values)
    except ValueError as exc:
        raise MalformedName(f"{filename!r}: {exc}") from exc


def derivative_dir(pipeline_name: str, subject: str, session: Optional[str] = None) -> str:
    """Relative derivative location, without any modality directory."""
    if not isinstance(pipeline_name, str) or not _PIPELINE.fullmatch(pipeline_name):
        raise InvalidPipelineName(f"invalid pipeline name {pipeline_name!r}")
    if not is_label(subject) or (session is not None and not is_label(session)):
        raise ValueError(f"invalid subject/session label: {subject!r}/{session!r}")
    parts = ["derivatives", pipeline_name, f"sub-{subject}"]
    if session is not None:
        parts.append(f"ses-{session}")
    return "/".join(parts)


@dataclass(frozen=True)
class ScanRecord:
    relative_path: str
    entities: EntitySet
    sidecar: dict = field(default_factory=dict, compare=True, hash=False)
    byte_size: int = 0

    def __post_init__(self):
        if PurePosixPath(self.relative_path).name != format_bids_name(self.entities):
            raise ValueError(f"{self.relative_path}: filename disagrees with entities")


@dataclass(frozen=True)
class IndexWarning:
    path: str
    reason: str

    def __str__(self) -> str:
        return f"WARN {self.path} {self.reason}"


@dataclass(frozen=True)
class DatasetIndex:
    """Read-only view of one dataset.

    ``sessions`` maps ``(subject, session)`` to scan records sorted by path;
    ``derivative_runs`` maps ``(pipeline, subject, session)`` to a
    :class:`CompletionState`.  ``derivative_files`` lists, for complete runs
    only, the output paths recorded in provenance (dataset-relative).
    """

    dataset_name: str
    root: str
    sessions: dict
    derivative_runs: dict
    derivative_files: dict = field(default_factory=dict)
    warnings: tuple = ()

    @property
    def n_files(self) -> int:
        return sum(len(v) for v in self.sessions.values())

    def scans(self, subject: str, session: Optional[str]) -> tuple:
        return self.sessions.get((subject, session), ())

    def summary(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "sessions": len(self.sessions),
            "files": self.n_files,
            "derivative_runs": len(self.derivative_runs),
            "warnings": len(self.warnings),
        }


def _sort_key_session(key):
    subject, session = key[-2], key[-1]
    return (*key[:-2], subject, session or "")


def _read_sidecar(path: Path, warnings: list, rel: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        return {}
    except (OSError, ValueError) as exc:
        warnings.append(IndexWarning(rel, f"unreadable-sidecar:{type(exc).__name__}"))
        return {}
    if not isinstance(data, dict):
        warnings.append(IndexWarning(rel, "sidecar-not-an-object"))
        return {}
    return data


def _resolve_once(path: Path) -> Optional[Path]:
    """Follow at most one symlink level; None if it does not end at a regular file."""
    try:
        st = path.lstat()
    except OSError:
        return None
    if not stat.S_ISLNK(st.st_mode):
        return path if stat.S_ISREG(st.st_mode) else None
    target = Path(os.readlink(path))
    if not target.is_absolute():
        target = path.parent / target
    try:
        tst = target.lstat()
    except OSError:
        return None
    return target if stat.S_ISREG(tst.st_mode) else None


def _expected_dir(entities: EntitySet) -> str:
    return str(PurePosixPath(entities.relative_path()).parent)


def _index_subject(root: Path, subject_dir: Path, warnings: list, sessions: dict) -> None:
    sidecar_cache: dict = {}
    for dirpath, dirnames, filenames in os.walk(subject_dir):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            try:
                entities = parse_bids_name(name)
            except MalformedName as exc:
                warnings.append(IndexWarning(rel, f"malformed-name: {exc}"))
                continue
            if _expected_dir(entities) != str(PurePosixPath(rel).parent):
                warnings.append(IndexWarning(rel, "misplaced-file"))
                continue
            real = _resolve_once(full)
            if real is None:
                reason = "broken-link" if full.is_symlink() else "not-a-regular-file"
                warnings.append(IndexWarning(rel, reason))
                continue
            sidecar_rel = PurePosixPath(rel).parent / format_bids_name(entities.with_extension(".json"))
            if sidecar_rel not in sidecar_cache:
                sidecar_path = _resolve_once(root / sidecar_rel)
                sidecar_cache[sidecar_rel] = (
                    _read_sidecar(sidecar_path, warnings, str(sidecar_rel)) if sidecar_path else {}
                )
            record = ScanRecord(rel, entities, sidecar_cache[sidecar_rel], real.stat().st_size)
            sessions.setdefault((entities.subject, entities.session), []).append(record)


def derivative_run_dirs(root: str | os.PathLike, warnings: Optional[list] = None):
    """Yield ``(pipeline, subject, session, path)`` for every derivative run directory.

    A subject directory holding ``ses-*`` children is split per session;
    otherwise the subject directory itself is the run (sessionless dataset).
    """
    root = Path(root)
    deriv = root / "derivatives"
    if not deriv.is_dir():
        return
    for pipeline_dir in sorted(p for p in deriv.iterdir() if p.is_dir()):
        if not _PIPELINE.fullmatch(pipeline_dir.name):
            if warnings is not None:
                warnings.append(
                    IndexWarning(pipeline_dir.relative_to(root).as_posix(), "invalid-pipeline-dir")
                )
            continue
        for subject_dir in sorted(pipeline_dir.glob("sub-*")):
            subject = subject_dir.name[4:]
            if not subject_dir.is_dir() or not is_label(subject):
                continue
            session_dirs = sorted(p for p in subject_dir.glob("ses-*") if p.is_dir())
            targets = [(d.name[4:], d) for d in session_dirs if is_label(d.name[4:])]
            for session, run_dir in targets or [(None, subject_dir)]:
                yield pipeline_dir.name, subject, session, run_dir


def _index_derivatives(root: Path, warnings: list) -> tuple[dict, dict]:
    runs: dict = {}
    files: dict = {}
    for pipeline, subject, session, run_dir in derivative_run_dirs(root, warnings):
        key = (pipeline, subject, session)
        state = is_complete(run_dir)
        runs[key] = state
        if state is CompletionState.COMPLETE:
            rel_dir = run_dir.relative_to(root).as_posix()
            files[key] = tuple(f"{rel_dir}/{o.path}" for o in read_provenance(run_dir).outputs)
    return runs, files


def index_dataset(root: str | os.PathLike) -> DatasetIndex:
    """Index every parseable raw file and every derivative run under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(f"dataset root not found: {root}")
    subject_dirs = sorted(p for p in root.glob("sub-*") if p.is_dir())
    if not subject_dirs and not (root / "derivatives").is_dir():
        raise NotADataset(f"{root} has no sub-* directories and no derivatives/")

    warnings: list = []
    sessions: dict = {}
    for subject_dir in subject_dirs:
        _index_subject(root, subject_dir, warnings, sessions)
    runs, files = _index_derivatives(root, warnings)

    for w in warnings:
        logger.warning("%s", w)
    return DatasetIndex(
        dataset_name=root.name,
        root=str(root.resolve()),
        sessions={
            k: tuple(sorted(sessions[k], key=lambda r: r.relative_path))
            for k in sorted(sessions, key=_sort_key_session)
        },
        derivative_runs={k: runs[k] for k in sorted(runs, key=_sort_key_session)},
        derivative_files={k: files[k] for k in sorted(files, key=_sort_key_session)},
        warnings=tuple(sorted(warnings, key=lambda w: (w.path, w.reason))),
    )
