"""Declarative pipeline specifications.

A registry is a directory of TOML files, one per pipeline::

    name = "freesurfer-stub"
    version = "7.2.0"
    container_ref = "freesurfer_7.2.0.sif"
    container_digest = "<64 hex chars>"
    command_template = "recon-all -i {inputs_dir} -sd {outputs_dir}"

    [resources]
    cpus = 1
    memory_gb = 8
    walltime_minutes = 480

    [[selectors]]
    kind = "raw_modality"
    modality = "T1w"
    min_count = 1
    max_count = 1
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from bidsbatch._toml import toml
from bidsbatch.errors import BidsBatchError
from bidsbatch.integrity import Unreadable, digest_file

IMAGE_EXTENSIONS = (".sif", ".simg", ".img")
PLACEHOLDERS = ("{inputs_dir}", "{outputs_dir}")
MODALITIES = ("T1w", "dwi")

_NAME = re.compile(r"[A-Za-z0-9_-]+")
_HEX256 = re.compile(r"[0-9a-f]{64}")


class RegistryError(BidsBatchError):
    pass


class MalformedSpec(RegistryError):
    pass


class DuplicatePipelineName(RegistryError):
    pass


class UnknownPipeline(RegistryError):
    pass


class ImageMissing(RegistryError):
    pass


class ImageDigestMismatch(RegistryError):
    pass


@dataclass(frozen=True)
class InputSelector:
    kind: str
    modality: Optional[str] = None
    pipeline_name: Optional[str] = None
    min_count: int = 1
    max_count: Optional[int] = None

    def __post_init__(self):
        if self.kind == "raw_modality":
            if self.modality not in MODALITIES:
                raise ValueError(f"raw_modality selector needs modality in {MODALITIES}")
        elif self.kind == "derivative":
            if not self.pipeline_name or not _NAME.fullmatch(self.pipeline_name):
                raise ValueError("derivative selector needs a valid pipeline_name")
        else:
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if not isinstance(self.min_count, int) or self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.max_count is not None and (
            not isinstance(self.max_count, int) or self.max_count < self.min_count
        ):
            raise ValueError("max_count must be an integer >= min_count")

    def describe(self) -> str:
        return self.modality if self.kind == "raw_modality" else self.pipeline_name


@dataclass(frozen=True)
class ResourceRequest:
    cpus: int
    memory_gb: float
    walltime_minutes: int

    def __post_init__(self):
        if not isinstance(self.cpus, int) or self.cpus < 1:
            raise ValueError("cpus must be a positive integer")
        if not isinstance(self.memory_gb, (int, float)) or self.memory_gb <= 0:
            raise ValueError("memory_gb must be positive")
        if not isinstance(self.walltime_minutes, int) or self.walltime_minutes < 1:
            raise ValueError("walltime_minutes must be a positive integer")


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    version: str
    container_ref: str
    container_digest: str
    selectors: tuple
    resources: ResourceRequest
    command_template: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not _NAME.fullmatch(self.name):
            raise ValueError(f"invalid pipeline name {self.name!r}")
        if not str(self.container_ref).endswith(IMAGE_EXTENSIONS):
            raise ValueError(f"container_ref must end with one of {IMAGE_EXTENSIONS}")
        if not _HEX256.fullmatch(str(self.container_digest)):
            raise ValueError("container_digest must be 64 lowercase hex characters")
        if not self.selectors:
            raise ValueError("at least one input selector is required")
        for ph in PLACEHOLDERS:
            if ph not in self.command_template:
                raise ValueError(f"command_template lacks {ph}")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineSpec":
        try:
            return cls(
                name=data["name"],
                version=str(data["version"]),
                container_ref=data["container_ref"],
                container_digest=data["container_digest"],
                selectors=tuple(InputSelector(**s) for s in data["selectors"]),
                resources=ResourceRequest(**data["resources"]),
                command_template=data["command_template"],
            )
        except KeyError as exc:
            raise MalformedSpec(f"missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise MalformedSpec(str(exc)) from exc


def load_spec(path: str | os.PathLike) -> PipelineSpec:
    try:
        with open(path, "rb") as fh:
            data = toml.load(fh)
    except toml.TOMLDecodeError as exc:
        raise MalformedSpec(f"{path}: {exc}") from exc
    try:
        return PipelineSpec.from_dict(data)
    except MalformedSpec as exc:
        raise MalformedSpec(f"{path}: {exc}") from exc


def load_registry(directory: str | os.PathLike) -> list[PipelineSpec]:
    """Load every ``*.toml`` spec; result is sorted by pipeline name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise RegistryError(f"registry directory not found: {directory}")
    specs: dict[str, tuple[PipelineSpec, Path]] = {}
    for path in sorted(directory.glob("*.toml")):
        spec = load_spec(path)
        if spec.name in specs:
            raise DuplicatePipelineName(
                f"pipeline {spec.name!r} defined in both {specs[spec.name][1].name} and {path.name}"
            )
        specs[spec.name] = (spec, path)
    return [specs[name][0] for name in sorted(specs)]


def find_spec(specs, name: str) -> PipelineSpec:
    for spec in specs:
        if spec.name == name:
            return spec
    raise UnknownPipeline(f"pipeline {name!r} not in registry")


def image_path(spec: PipelineSpec, image_store: str | os.PathLike) -> Path:
    return Path(image_store) / spec.container_ref


def validate_spec(spec: PipelineSpec, image_store: str | os.PathLike) -> None:
    """Raise unless the stored image hashes to ``spec.container_digest``."""
    path = image_path(spec, image_store)
    if not path.is_file():
        raise ImageMissing(f"container image not found: {path}")
    try:
        actual = digest_file(path)
    except Unreadable as exc:
        raise ImageMissing(str(exc)) from exc
    if actual != spec.container_digest:
        raise ImageDigestMismatch(
            f"{path}: digest {actual} does not match registered {spec.container_digest}"
        )
