"""Classify converted scans and lay them into a tiered, link-farmed archive.

Real files live in a storage tier under a content-addressed layout
(``<tier>/<dataset>/<digest[:2]>/<digest>``); the BIDS dataset tree only
holds symbolic links to them.

Classification rules are TOML, one ``[[rule]]`` table per rule, first
match wins::

    [[rule]]
    label = "T1w"
    protocol_patterns = ["mprage", "t1w?"]
    resolution_range_mm = [0.5, 1.5]
    matrix_min = [128, 128, 100]

    [[rule]]
    label = "DWI"
    protocol_patterns = ["diff", "dti", "dwi"]
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from bidsbatch._toml import toml
from bidsbatch.bids import EntitySet
from bidsbatch.errors import BidsBatchError, ConfigError
from bidsbatch.integrity import Unreadable, digest_file, transfer_verified

LABELS = ("T1w", "DWI", "Other")
# label -> (BIDS suffix, companion extensions besides the image)
_LAYOUT = {"T1w": ("T1w", (".json",)), "DWI": ("dwi", (".json", ".bval", ".bvec"))}


class IngestError(BidsBatchError):
    pass


class DuplicateTarget(IngestError):
    pass


class MissingCompanion(IngestError):
    pass


class UnauthorizedTier(IngestError):
    pass


class TierUnwritable(IngestError):
    pass


class CollisionWithDifferentContent(IngestError):
    pass


@dataclass(frozen=True)
class RawScanMeta:
    source_path: str
    protocol_name: str
    voxel_resolution_mm: tuple
    matrix_dims: tuple
    sidecar_present: bool = True

    def __post_init__(self):
        if len(self.voxel_resolution_mm) != 3 or any(r <= 0 for r in self.voxel_resolution_mm):
            raise ValueError("voxel_resolution_mm must be three positive numbers")
        if len(self.matrix_dims) != 3 or any(int(m) != m or m < 1 for m in self.matrix_dims):
            raise ValueError("matrix_dims must be three integers >= 1")


@dataclass(frozen=True)
class ClassificationRule:
    label: str
    protocol_patterns: tuple = ()
    resolution_range_mm: Optional[tuple] = None
    matrix_min: Optional[tuple] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"rule label must be one of {LABELS}")
        if not (self.protocol_patterns or self.resolution_range_mm or self.matrix_min):
            raise ValueError("a rule needs at least one criterion")
        if self.resolution_range_mm is not None:
            lo, hi = self.resolution_range_mm
            if lo > hi:
                raise ValueError("resolution_range_mm must be [min, max]")
        for p in self.protocol_patterns:
            re.compile(p)

    def matches(self, meta: RawScanMeta) -> bool:
        if self.protocol_patterns and not any(
            re.search(p, meta.protocol_name, re.IGNORECASE) for p in self.protocol_patterns
        ):
            return False
        if self.resolution_range_mm is not None:
            lo, hi = self.resolution_range_mm
            if not all(lo <= r <= hi for r in meta.voxel_resolution_mm):
                return False
        if self.matrix_min is not None:
            if not all(m >= lim for m, lim in zip(meta.matrix_dims, self.matrix_min)):
                return False
        return True


def load_rules(path: str | os.PathLike) -> list[ClassificationRule]:
    try:
        with open(path, "rb") as fh:
            data = toml.load(fh)
        return [
            ClassificationRule(
                label=r["label"],
                protocol_patterns=tuple(r.get("protocol_patterns", ())),
                resolution_range_mm=tuple(r["resolution_range_mm"]) if "resolution_range_mm" in r else None,
                matrix_min=tuple(r["matrix_min"]) if "matrix_min" in r else None,
            )
            for r in data.get("rule", [])
        ]
    except (OSError, toml.TOMLDecodeError, KeyError, TypeError, ValueError, re.error) as exc:
        raise ConfigError(f"{path}: invalid rules file: {exc}") from exc


def classify_scan(meta: RawScanMeta, rules) -> str:
    if not rules:
        raise ValueError("at least one classification rule is required")
    for rule in rules:
        if rule.matches(meta):
            return rule.label
    return "Other"


@dataclass(frozen=True)
class StorageTier:
    name: str
    root: str
    authorized: bool = True

    def __post_init__(self):
        if self.name not in ("general", "restricted"):
            raise ValueError(f"unknown tier {self.name!r}")


@dataclass(frozen=True)
class PlanEntry:
    source: str
    real_file: str
    link_path: str
    digest: str


@dataclass(frozen=True)
class LinkFarmPlan:
    dataset_root: str
    tier: str
    entries: tuple = ()

    def to_json(self) -> str:
        d = {
            "dataset_root": self.dataset_root,
            "tier": self.tier,
            "entries": [e.__dict__ for e in self.entries],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LinkFarmPlan":
        d = json.loads(text)
        return cls(d["dataset_root"], d["tier"], tuple(PlanEntry(**e) for e in d["entries"]))


def _source_files(meta: RawScanMeta, label: str) -> list[tuple[str, Path]]:
    src = Path(meta.source_path)
    name = src.name
    base = name[: -len(".nii.gz")] if name.endswith(".nii.gz") else src.stem
    files = [(".nii.gz", src)]
    for ext in _LAYOUT[label][1]:
        companion = src.with_name(base + ext)
        if ext == ".json" and not meta.sidecar_present:
            continue
        if not companion.is_file():
            raise MissingCompanion(f"{companion} required for {label} scan {src}")
        files.append((ext, companion))
    return files


def plan_ingest(scans, tier: StorageTier, dataset_root: str | os.PathLike) -> LinkFarmPlan:
    """Plan where each scan's files go; reads sources for digests, writes nothing.

    ``scans`` is an iterable of ``(RawScanMeta, label, EntitySet)``; the
    EntitySet's extension is ignored and set per file.
    """
    if tier.name == "restricted" and not tier.authorized:
        raise UnauthorizedTier("restricted tier targets require authorized = true")
    dataset_root = Path(dataset_root).resolve()
    tier_root = Path(tier.root).resolve()
    dataset = dataset_root.name
    entries = []
    seen_links: dict[str, str] = {}
    for meta, label, target in scans:
        if label not in _LAYOUT:
            raise ValueError(f"only T1w and DWI scans are ingested, got {label!r}")
        suffix = _LAYOUT[label][0]
        if target.suffix != suffix:
            raise ValueError(f"{meta.source_path}: label {label} needs suffix {suffix}, target has {target.suffix}")
        for ext, src in _source_files(meta, label):
            entities = target.with_extension(ext)
            link = (dataset_root / entities.relative_path()).as_posix()
            if link in seen_links:
                raise DuplicateTarget(f"{link} targeted by both {seen_links[link]} and {src}")
            seen_links[link] = str(src)
            try:
                digest = digest_file(src)
            except Unreadable as exc:
                raise IngestError(str(exc)) from exc
            real = tier_root / dataset / digest[:2] / digest
            entries.append(PlanEntry(str(src), real.as_posix(), link, digest))
    entries.sort(key=lambda e: e.link_path)
    return LinkFarmPlan(dataset_root.as_posix(), tier.name, tuple(entries))


@dataclass
class IngestReport:
    rows: list = field(default_factory=list)

    def _count(self, action: str) -> int:
        return sum(1 for r in self.rows if r[2] == action)

    @property
    def created(self) -> int:
        return self._count("created")

    @property
    def skipped(self) -> int:
        return self._count("skipped")

    @property
    def created_files(self) -> int:
        return sum(1 for r in self.rows if r[3])

    def write_csv(self, path: str | os.PathLike) -> Path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("link_path", "real_path", "action"))
            writer.writerows(r[:3] for r in self.rows)
        return Path(path)


def _place_real_file(entry: PlanEntry) -> bool:
    real = Path(entry.real_file)
    if real.exists():
        if digest_file(real) != entry.digest:
            raise CollisionWithDifferentContent(f"{real} exists with different content")
        return False
    try:
        real.parent.mkdir(parents=True, exist_ok=True)
        tmp = real.with_name(real.name + ".partial")
        transfer_verified(entry.source, tmp)
        os.replace(tmp, real)
    except PermissionError as exc:
        raise TierUnwritable(f"cannot write into tier at {real.parent}: {exc}") from exc
    if digest_file(real) != entry.digest:
        real.unlink()
        raise CollisionWithDifferentContent(f"source {entry.source} changed since planning")
    return True


def _place_link(entry: PlanEntry) -> bool:
    link = Path(entry.link_path)
    if link.is_symlink():
        if os.readlink(link) == entry.real_file:
            return False
        raise CollisionWithDifferentContent(f"{link} already links to {os.readlink(link)}")
    if link.exists():
        if link.is_file() and digest_file(link) == entry.digest:
            return False
        raise CollisionWithDifferentContent(f"{link} exists with different content")
    link.parent.mkdir(parents=True, exist_ok=True)
    link.symlink_to(entry.real_file)
    return True


def apply_ingest(plan: LinkFarmPlan) -> IngestReport:
    """Execute a plan.  Re-applying an applied plan changes nothing."""
    report = IngestReport()
    for entry in plan.entries:
        created_file = _place_real_file(entry)
        created_link = _place_link(entry)
        action = "created" if created_link else "skipped"
        report.rows.append((entry.link_path, entry.real_file, action, created_file))
    return report


def scans_from_json(path: str | os.PathLike, rules) -> list:
    """Read a scan list for ``ingest plan`` and classify each entry.

    Each JSON object carries the RawScanMeta fields plus the target
    ``subject`` and optional ``session``, ``acquisition``, ``direction``,
    ``run``.  Scans classified as ``Other`` are dropped.
    """
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    out = []
    for r in records:
        meta = RawScanMeta(
            source_path=r["source_path"],
            protocol_name=r["protocol_name"],
            voxel_resolution_mm=tuple(r["voxel_resolution_mm"]),
            matrix_dims=tuple(r["matrix_dims"]),
            sidecar_present=r.get("sidecar_present", True),
        )
        label = classify_scan(meta, rules)
        if label == "Other":
            continue
        target = EntitySet(
            subject=r["subject"],
            suffix=_LAYOUT[label][0],
            extension=".nii.gz",
            session=r.get("session"),
            acquisition=r.get("acquisition"),
            direction=r.get("direction"),
            run=r.get("run"),
        )
        out.append((meta, label, target))
    return out


def tree_digest(root: str | os.PathLike) -> dict:
    """Map every path under ``root`` to its link target or content digest."""
    out = {}
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames + [d for d in dirnames if (Path(dirpath) / d).is_symlink()]):
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            out[rel] = "->" + os.readlink(p) if p.is_symlink() else digest_file(p)
    return out

