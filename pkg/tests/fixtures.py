"""Synthetic archives, registries and container images for tests."""

from __future__ import annotations

import json
import random
from pathlib import Path

from bidsbatch.bids import EntitySet
from bidsbatch.integrity import digest_file

T1_TEMPLATE = "stubrun {inputs_dir} {outputs_dir}"


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def make_dataset(
    root,
    subjects=("01", "02", "03"),
    sessions=("01", "02"),
    missing_t1w=(),
    with_dwi=True,
    name="fixture",
) -> Path:
    """Build a small raw BIDS tree.

    ``missing_t1w`` holds ``(subject, session)`` pairs without a T1w image.
    Returns the dataset root.
    """
    ds = Path(root) / name
    ds.mkdir(parents=True, exist_ok=True)
    (ds / "dataset_description.json").write_text(json.dumps({"Name": name, "BIDSVersion": "1.8.0"}))
    for sub in subjects:
        for ses in sessions:
            tag = f"{sub}-{ses}".encode()
            if (sub, ses) not in missing_t1w:
                t1 = EntitySet(sub, "T1w", ".nii.gz", session=ses)
                _write(ds / t1.relative_path(), b"T1w image " + tag)
                _write(ds / t1.with_extension(".json").relative_path(), json.dumps({"EchoTime": 0.003}).encode())
            if with_dwi:
                dwi = EntitySet(sub, "dwi", ".nii.gz", session=ses)
                _write(ds / dwi.relative_path(), b"dwi image " + tag)
                _write(ds / dwi.with_extension(".json").relative_path(), b"{}")
                _write(ds / dwi.with_extension(".bval").relative_path(), b"0 1000 1000\n")
                _write(ds / dwi.with_extension(".bvec").relative_path(), b"0 1 0\n0 0 1\n0 0 0\n")
    return ds


def random_dataset(root, rng: random.Random, name="rand") -> tuple[Path, int, set]:
    """Random subjects/sessions with random missing T1w; returns (root, n_sessions, missing)."""
    n_sub = rng.randint(1, 4)
    n_ses = rng.randint(1, 3)
    subjects = [f"{i:02d}" for i in range(1, n_sub + 1)]
    sessions = [f"s{i}" for i in range(1, n_ses + 1)]
    missing = {(s, t) for s in subjects for t in sessions if rng.random() < 0.3}
    # a session missing its T1w keeps its dwi so the session still exists
    with_dwi = bool(missing) or rng.random() < 0.5
    ds = make_dataset(root, subjects, sessions, missing_t1w=missing, with_dwi=with_dwi, name=name)
    return ds, n_sub * n_ses, missing


def make_image_store(root) -> tuple[Path, str]:
    store = Path(root) / "images"
    store.mkdir(parents=True, exist_ok=True)
    image = store / "stub_1.0.sif"
    image.write_bytes(b"not really a singularity image\n")
    return store, digest_file(image)


def make_registry(root, digest: str, name="stubpipe", extra=None) -> Path:
    reg = Path(root) / "registry"
    reg.mkdir(parents=True, exist_ok=True)
    text = f'''name = "{name}"
version = "1.0"
container_ref = "stub_1.0.sif"
container_digest = "{digest}"
command_template = "{T1_TEMPLATE}"

[resources]
cpus = 2
memory_gb = 7.5
walltime_minutes = 90

[[selectors]]
kind = "raw_modality"
modality = "T1w"
min_count = 1
max_count = 1
'''
    (reg / f"{name}.toml").write_text(text + (extra or ""))
    return reg


def entity_sets():
    """Hypothesis strategy over valid EntitySets."""
    from hypothesis import strategies as st

    label = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789", min_size=1, max_size=8)
    opt = st.none() | label

    @st.composite
    def build(draw):
        suffix = draw(st.sampled_from(("T1w", "dwi")))
        exts = (".nii.gz", ".json", ".bval", ".bvec") if suffix == "dwi" else (".nii.gz", ".json")
        return EntitySet(
            subject=draw(label),
            suffix=suffix,
            extension=draw(st.sampled_from(exts)),
            session=draw(opt),
            acquisition=draw(opt),
            direction=draw(opt),
            run=draw(st.none() | st.integers(1, 10_000)),
        )

    return build()


MALFORMED_NAMES = [
    "",
    "T1w.nii.gz",
    "sub-01.nii.gz",
    "sub-01_T1w",
    "sub-01_T1w.nii",
    "sub-01_T1w.gz",
    "sub-01_T1w.txt",
    "sub-01_T2w.nii.gz",
    "sub-01_bold.nii.gz",
    "sub-01_t1w.nii.gz",
    "sub-01_DWI.nii.gz",
    "T1w_sub-01.nii.gz",
    "ses-01_sub-01_T1w.nii.gz",
    "sub-01_ses-01_ses-02_T1w.nii.gz",
    "sub-01_sub-02_T1w.nii.gz",
    "sub-01_run-1_acq-x_T1w.nii.gz",
    "sub-01_dir-AP_acq-x_dwi.nii.gz",
    "sub-01_run-01_T1w.nii.gz",
    "sub-01_run-0_T1w.nii.gz",
    "sub-01_run--1_T1w.nii.gz",
    "sub-01_run-a_T1w.nii.gz",
    "sub-01_run-1.5_T1w.nii.gz",
    "sub-01_run-_T1w.nii.gz",
    "sub-_T1w.nii.gz",
    "sub-01_ses-_T1w.nii.gz",
    "sub-01_acq-_T1w.nii.gz",
    "sub-0-1_T1w.nii.gz",
    "sub-01_ses-a_b_T1w.nii.gz",
    "sub-01_ses-a.b_T1w.nii.gz",
    "sub-01_ses-é_T1w.nii.gz",
    "sub-01 _T1w.nii.gz",
    "sub-01_T1w.bval",
    "sub-01_T1w.bvec",
    "sub-01_echo-1_T1w.nii.gz",
    "sub-01_task-rest_T1w.nii.gz",
    "sub-01_rec-norm_T1w.nii.gz",
    "sub01_T1w.nii.gz",
    "sub_T1w.nii.gz",
    "sub-01__T1w.nii.gz",
    "_sub-01_T1w.nii.gz",
    "sub-01_T1w_.nii.gz",
    "sub-01/anat/sub-01_T1w.nii.gz",
    "anat\\sub-01_T1w.nii.gz",
    "sub-01_ses_T1w.nii.gz",
    "sub-01_acq_T1w.nii.gz",
    "sub-01_dwi.nii.gz.json",
    "sub-01_T1w.json.nii",
    "sub-01_ses-01_T1w.NII.GZ",
    "SUB-01_T1w.nii.gz",
    "sub-01_dir-AP_dir-PA_dwi.nii.gz",
]


def plan_bundle(dataset_root, spec, image_store, workdir, *, throttle=None):
    """Index, query and generate a bundle; returns (manifest, bundle or None)."""
    from bidsbatch.bids import index_dataset
    from bidsbatch.query import build_manifest
    from bidsbatch.scriptgen import SubmitSpec, generate_bundle

    manifest = build_manifest(index_dataset(dataset_root), spec)
    if not manifest.items:
        return manifest, None
    submit = SubmitSpec("production", str(Path(workdir).resolve() / "scratch"), array_throttle=throttle)
    bundle = generate_bundle(manifest, spec, submit, Path(workdir) / "scripts", image_store=image_store)
    return manifest, bundle
