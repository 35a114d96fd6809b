"""Find sessions that can run a pipeline but have not, and explain the rest."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

from bidsbatch.bids import DatasetIndex, derivative_dir
from bidsbatch.errors import BidsBatchError
from bidsbatch.integrity import CompletionState, utc_now
from bidsbatch.registry import InputSelector, PipelineSpec

MISSING_RAW_INPUT = "MISSING_RAW_INPUT"
MISSING_DERIVATIVE_INPUT = "MISSING_DERIVATIVE_INPUT"
ALREADY_COMPLETE = "ALREADY_COMPLETE"
PARTIAL_OUTPUT_PRESENT = "PARTIAL_OUTPUT_PRESENT"

CSV_HEADER = ("dataset", "subject", "session", "pipeline", "cause_code", "cause_text")
_COMPANION_ORDER = (".nii.gz", ".json", ".bval", ".bvec")


class OutUnwritable(BidsBatchError):
    pass


@dataclass(frozen=True)
class WorkItem:
    pipeline_name: str
    dataset_name: str
    subject: str
    session: Optional[str]
    resolved_inputs: tuple
    output_dir: str

    def __post_init__(self):
        if not self.resolved_inputs:
            raise ValueError("a work item needs at least one input")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved_inputs"] = list(self.resolved_inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkItem":
        return cls(**{**d, "resolved_inputs": tuple(d["resolved_inputs"])})


@dataclass(frozen=True)
class IneligibilityRecord:
    dataset_name: str
    subject: str
    session: Optional[str]
    pipeline_name: str
    cause_code: str
    cause_text: str

    @property
    def cause_kind(self) -> str:
        return self.cause_code.split("(", 1)[0]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunManifest:
    created_at: str
    pipeline_name: str
    dataset_name: str
    dataset_root: str
    items: tuple
    ineligible: tuple

    def content_dict(self) -> dict:
        """Everything except the creation timestamp."""
        return {
            "pipeline_name": self.pipeline_name,
            "dataset_name": self.dataset_name,
            "dataset_root": self.dataset_root,
            "items": [i.to_dict() for i in self.items],
            "ineligible": [r.to_dict() for r in self.ineligible],
        }

    def to_dict(self) -> dict:
        return {"created_at": self.created_at, **self.content_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            created_at=d["created_at"],
            pipeline_name=d["pipeline_name"],
            dataset_name=d["dataset_name"],
            dataset_root=d["dataset_root"],
            items=tuple(WorkItem.from_dict(i) for i in d["items"]),
            ineligible=tuple(IneligibilityRecord(**r) for r in d["ineligible"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls.from_dict(json.loads(text))

    def content_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _run_order(record):
    e = record.entities
    return (e.run or 0, record.relative_path)


def _resolve_raw(scans, selector: InputSelector) -> Optional[list]:
    images = sorted(
        (s for s in scans if s.entities.suffix == selector.modality and s.entities.extension == ".nii.gz"),
        key=_run_order,
    )
    if len(images) < selector.min_count:
        return None
    chosen = images[: selector.max_count] if selector.max_count else images
    inputs = []
    for image in chosen:
        stem = image.entities
        companions = [s for s in scans if s.entities.with_extension(".nii.gz") == stem]
        companions.sort(key=lambda s: _COMPANION_ORDER.index(s.entities.extension))
        inputs.extend(s.relative_path for s in companions)
    return inputs


def _raw_cause(selector: InputSelector, found: int) -> str:
    if found == 0:
        return f"no available {selector.modality} image in the scanning session"
    return (
        f"only {found} available {selector.modality} image(s) in the scanning session, "
        f"{selector.min_count} required"
    )


def evaluate_session(
    index: DatasetIndex, spec: PipelineSpec, subject: str, session: Optional[str]
) -> Union[WorkItem, IneligibilityRecord]:
    """Decide whether one session can run ``spec``."""

    def ineligible(code: str, text: str) -> IneligibilityRecord:
        return IneligibilityRecord(index.dataset_name, subject, session, spec.name, code, text)

    state = index.derivative_runs.get((spec.name, subject, session), CompletionState.ABSENT)
    if state is CompletionState.COMPLETE:
        return ineligible(
            ALREADY_COMPLETE, f"{spec.name} outputs already present with valid provenance"
        )
    if state is CompletionState.PARTIAL:
        return ineligible(
            PARTIAL_OUTPUT_PRESENT,
            f"{spec.name} outputs present without valid provenance; review before re-running",
        )

    scans = index.scans(subject, session)
    inputs: list = []
    for selector in spec.selectors:
        if selector.kind == "raw_modality":
            resolved = _resolve_raw(scans, selector)
            if resolved is None:
                found = sum(
                    1
                    for s in scans
                    if s.entities.suffix == selector.modality and s.entities.extension == ".nii.gz"
                )
                return ineligible(
                    f"{MISSING_RAW_INPUT}({selector.modality})", _raw_cause(selector, found)
                )
        else:
            key = (selector.pipeline_name, subject, session)
            if index.derivative_runs.get(key) is not CompletionState.COMPLETE:
                return ineligible(
                    f"{MISSING_DERIVATIVE_INPUT}({selector.pipeline_name})",
                    f"no complete {selector.pipeline_name} outputs for the scanning session",
                )
            resolved = list(index.derivative_files.get(key, ()))
        inputs.extend(p for p in resolved if p not in inputs)

    return WorkItem(
        pipeline_name=spec.name,
        dataset_name=index.dataset_name,
        subject=subject,
        session=session,
        resolved_inputs=tuple(inputs),
        output_dir=derivative_dir(spec.name, subject, session),
    )


def build_manifest(index: DatasetIndex, spec: PipelineSpec, *, created_at: Optional[str] = None) -> RunManifest:
    items, ineligible = [], []
    for subject, session in sorted(index.sessions, key=lambda k: (k[0], k[1] or "")):
        outcome = evaluate_session(index, spec, subject, session)
        (items if isinstance(outcome, WorkItem) else ineligible).append(outcome)
    return RunManifest(
        created_at=created_at or utc_now(),
        pipeline_name=spec.name,
        dataset_name=index.dataset_name,
        dataset_root=index.root,
        items=tuple(items),
        ineligible=tuple(ineligible),
    )


def write_ineligibility_csv(manifest: RunManifest, out: str | os.PathLike) -> Path:
    out = Path(out)
    rows = sorted(manifest.ineligible, key=lambda r: (r.subject, r.session or ""))
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in rows:
                writer.writerow(
                    (r.dataset_name, r.subject, r.session or "", r.pipeline_name, r.cause_code, r.cause_text)
                )
    except OSError as exc:
        raise OutUnwritable(f"cannot write {out}: {exc.strerror or exc}") from exc
    return out
