import hashlib
import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidsbatch import integrity
from bidsbatch.integrity import (
    PROVENANCE_NAME,
    CompletionState,
    FileEntry,
    IntegrityMismatch,
    OutputDigestMismatch,
    OutputsMissing,
    ProvenanceRecord,
    Unreadable,
    Unwritable,
    digest_file,
    is_complete,
    read_provenance,
    stage_out,
    transfer_verified,
    write_provenance,
)


def flip_first_byte(path):
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))


def record(outputs, started="2024-01-01T00:00:00Z", finished="2024-01-01T01:00:00Z"):
    return ProvenanceRecord(
        pipeline_name="p",
        pipeline_version="1",
        container_digest="0" * 64,
        started_at=started,
        finished_at=finished,
        user="u",
        hostname="h",
        inputs=(FileEntry("sub-01/anat/sub-01_T1w.nii.gz", "a" * 64),),
        outputs=tuple(outputs),
    )


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=1, max_size=5000))
def test_digest_matches_hashlib(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("d") / "f"
    p.write_bytes(data)
    assert digest_file(p) == hashlib.sha256(data).hexdigest()


def test_transfer_verified(tmp_path):
    src = tmp_path / "a.bin"
    src.write_bytes(os.urandom(3 << 20))
    r = transfer_verified(src, tmp_path / "x" / "y" / "b.bin")
    assert r.bytes == 3 << 20
    assert r.digest == digest_file(src) == digest_file(tmp_path / "x/y/b.bin")
    assert r.elapsed_seconds > 0


def test_transfer_mismatch_deletes_destination(tmp_path):
    src = tmp_path / "a"
    src.write_bytes(b"payload")
    dst = tmp_path / "b"
    with pytest.raises(IntegrityMismatch):
        transfer_verified(src, dst, after_write=flip_first_byte)
    assert not dst.exists()


def test_transfer_errors(tmp_path):
    with pytest.raises(Unreadable):
        transfer_verified(tmp_path / "nope", tmp_path / "b")
    src = tmp_path / "a"
    src.write_bytes(b"x")
    (tmp_path / "file").write_text("not a dir")
    with pytest.raises(Unwritable):
        transfer_verified(src, tmp_path / "file" / "b")


def test_provenance_round_trip(tmp_path):
    (tmp_path / "out.txt").write_text("hello")
    rec = record([FileEntry("out.txt", digest_file(tmp_path / "out.txt"))])
    path = write_provenance(rec, tmp_path)
    assert path.name == PROVENANCE_NAME
    assert read_provenance(tmp_path) == rec
    text = path.read_text()
    assert text == json.dumps(rec.to_dict(), sort_keys=True, indent=2) + "\n"
    assert is_complete(tmp_path) is CompletionState.COMPLETE
    assert not list(tmp_path.glob(".provenance.*"))


def test_provenance_rejects_bad_outputs(tmp_path):
    with pytest.raises(OutputsMissing):
        write_provenance(record([FileEntry("gone.txt", "0" * 64)]), tmp_path)
    (tmp_path / "out.txt").write_text("hello")
    with pytest.raises(OutputDigestMismatch):
        write_provenance(record([FileEntry("out.txt", "0" * 64)]), tmp_path)
    assert not (tmp_path / PROVENANCE_NAME).exists()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(outputs=[]),
        dict(outputs=[FileEntry(PROVENANCE_NAME, "0" * 64)]),
        dict(outputs=[FileEntry("x", "0" * 64)], started="2024-01-02T00:00:00Z"),
        dict(outputs=[FileEntry("x", "0" * 64)], started="yesterday"),
    ],
)
def test_provenance_validation(kwargs):
    with pytest.raises(ValueError):
        record(**kwargs)


def test_is_complete_states(tmp_path):
    d = tmp_path / "run"
    assert is_complete(d) is CompletionState.ABSENT
    d.mkdir()
    assert is_complete(d) is CompletionState.ABSENT
    (d / "out.txt").write_text("hello")
    assert is_complete(d) is CompletionState.PARTIAL
    write_provenance(record([FileEntry("out.txt", digest_file(d / "out.txt"))]), d)
    assert is_complete(d) is CompletionState.COMPLETE
    (d / "out.txt").write_text("tampered")
    assert is_complete(d) is CompletionState.PARTIAL
    (d / PROVENANCE_NAME).write_text("{not json")
    assert is_complete(d) is CompletionState.PARTIAL


def test_stage_out_all_or_nothing(tmp_path):
    src = tmp_path / "src"
    (src / "sub").mkdir(parents=True)
    for name in ("a", "b", "sub/c"):
        (src / name).write_text(name)
    dst = tmp_path / "archive" / "derivatives" / "p" / "sub-01"

    calls = []

    def failing(s, d):
        calls.append(s)
        if len(calls) == 3:
            return transfer_verified(s, d, after_write=flip_first_byte)
        return transfer_verified(s, d)

    with pytest.raises(IntegrityMismatch):
        stage_out(src, dst, transfer=failing)
    assert not (tmp_path / "archive").exists()

    receipts = stage_out(src, dst)
    assert sorted(os.path.relpath(r.dst, dst) for r in receipts) == ["a", "b", os.path.join("sub", "c")]
    with pytest.raises(Unwritable):
        stage_out(src, dst)


def test_stage_out_needs_outputs(tmp_path):
    (tmp_path / "src").mkdir()
    with pytest.raises(OutputsMissing):
        stage_out(tmp_path / "src", tmp_path / "dst")


def test_cli_stage_and_provenance(tmp_path):
    ds = tmp_path / "ds"
    (ds / "sub-01").mkdir(parents=True)
    raw = ds / "sub-01" / "in.nii.gz"
    raw.write_bytes(b"raw")
    scratch = tmp_path / "scratch"
    rin, rout = str(scratch / "in.jsonl"), str(scratch / "out.jsonl")
    scratch.mkdir()
    assert integrity.main(["stage-in", "--receipts", rin, str(raw), str(scratch / "inputs/in.nii.gz")]) == 0
    (scratch / "outputs").mkdir()
    (scratch / "outputs" / "res.txt").write_text("r")
    out = ds / "derivatives" / "p" / "sub-01"
    assert integrity.main(["stage-out", "--receipts", rout, str(scratch / "outputs"), str(out)]) == 0
    argv = [
        "provenance", "--output-dir", str(out), "--dataset-root", str(ds), "--pipeline", "p",
        "--version", "1", "--container-digest", "f" * 64, "--started-at", "2024-01-01T00:00:00Z",
        "--inputs", rin, "--outputs", rout,
    ]
    assert integrity.main(argv) == 0
    rec = read_provenance(out)
    assert rec.inputs == (FileEntry("sub-01/in.nii.gz", digest_file(raw)),)
    assert rec.outputs == (FileEntry("res.txt", digest_file(out / "res.txt")),)
    assert is_complete(out) is CompletionState.COMPLETE


def test_cli_stage_in_mismatch_exit_code(tmp_path):
    src = tmp_path / "a"
    src.write_bytes(b"data")

    def corrupt(s, d):
        return transfer_verified(s, d, after_write=flip_first_byte)

    code = integrity.main(["stage-in", "--receipts", str(tmp_path / "r"), str(src), str(tmp_path / "b")], transfer=corrupt)
    assert code == 1
    assert not (tmp_path / "b").exists()
