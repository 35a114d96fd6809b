import pytest

from fixtures import make_image_store, make_registry
from bidsbatch import registry
from bidsbatch.registry import (
    DuplicatePipelineName,
    ImageDigestMismatch,
    ImageMissing,
    InputSelector,
    MalformedSpec,
    PipelineSpec,
    ResourceRequest,
    UnknownPipeline,
)

DERIVED = '''
[[selectors]]
kind = "derivative"
pipeline_name = "stubpipe"
'''


def base(**over):
    d = dict(
        name="p",
        version="1",
        container_ref="p.sif",
        container_digest="a" * 64,
        selectors=[{"kind": "raw_modality", "modality": "dwi"}],
        resources={"cpus": 1, "memory_gb": 4, "walltime_minutes": 60},
        command_template="run {inputs_dir} {outputs_dir}",
    )
    d.update(over)
    return d


def test_from_dict():
    spec = PipelineSpec.from_dict(base())
    assert spec.selectors == (InputSelector("raw_modality", "dwi"),)
    assert spec.resources == ResourceRequest(1, 4, 60)


@pytest.mark.parametrize(
    "over",
    [
        dict(name="bad name"),
        dict(container_ref="p.tar"),
        dict(container_digest="abc"),
        dict(container_digest="A" * 64),
        dict(selectors=[]),
        dict(selectors=[{"kind": "raw_modality", "modality": "bold"}]),
        dict(selectors=[{"kind": "derivative"}]),
        dict(selectors=[{"kind": "other"}]),
        dict(selectors=[{"kind": "raw_modality", "modality": "T1w", "min_count": 2, "max_count": 1}]),
        dict(resources={"cpus": 0, "memory_gb": 4, "walltime_minutes": 60}),
        dict(resources={"cpus": 1, "memory_gb": -1, "walltime_minutes": 60}),
        dict(resources={"cpus": 1, "memory_gb": 4}),
        dict(command_template="run {inputs_dir}"),
    ],
)
def test_malformed(over):
    with pytest.raises(MalformedSpec):
        PipelineSpec.from_dict(base(**over))


def test_missing_field():
    d = base()
    del d["version"]
    with pytest.raises(MalformedSpec, match="version"):
        PipelineSpec.from_dict(d)


def test_load_registry(tmp_path):
    store, digest = make_image_store(tmp_path)
    reg = make_registry(tmp_path, digest)
    make_registry(tmp_path, digest, name="after", extra=DERIVED)
    specs = registry.load_registry(reg)
    assert [s.name for s in specs] == ["after", "stubpipe"]
    after = registry.find_spec(specs, "after")
    assert after.selectors[1] == InputSelector("derivative", pipeline_name="stubpipe")
    with pytest.raises(UnknownPipeline):
        registry.find_spec(specs, "nope")
    registry.validate_spec(after, store)


def test_duplicate_names(tmp_path):
    reg = make_registry(tmp_path, "a" * 64)
    (reg / "copy.toml").write_text((reg / "stubpipe.toml").read_text())
    with pytest.raises(DuplicatePipelineName):
        registry.load_registry(reg)


def test_bad_toml(tmp_path):
    (tmp_path / "x.toml").write_text("name = ")
    with pytest.raises(MalformedSpec):
        registry.load_registry(tmp_path)


def test_image_checks(tmp_path):
    store, digest = make_image_store(tmp_path)
    spec = PipelineSpec.from_dict(base(container_ref="stub_1.0.sif", container_digest="b" * 64))
    with pytest.raises(ImageDigestMismatch):
        registry.validate_spec(spec, store)
    with pytest.raises(ImageMissing):
        registry.validate_spec(spec, tmp_path / "elsewhere")
