"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion."""

import contextlib
import random
import re
import time
from decimal import Decimal

import pytest

from fixtures import MALFORMED_NAMES, make_dataset, plan_bundle, random_dataset
from bidsbatch.bench import (
    CostScenario,
    EchoServer,
    amortized_hourly_rate,
    compute_job_cost,
    gbps,
    measure_latency,
    measure_throughput,
    round_half_up,
    storage_cost_annual,
)
from bidsbatch.bids import EntitySet, MalformedName, derivative_dir, format_bids_name, index_dataset, parse_bids_name
from bidsbatch.ingest import RawScanMeta, StorageTier, apply_ingest, plan_ingest, tree_digest
from bidsbatch.integrity import PROVENANCE_NAME, CompletionState, is_complete, parse_timestamp, read_provenance
from bidsbatch.query import ALREADY_COMPLETE, MISSING_RAW_INPUT, build_manifest
from bidsbatch.simsched import SimCluster, assert_archive_consistency, run_bundle


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(number, title, limit_s):
        start = time.perf_counter()
        ok = False
        detail = ""
        try:
            yield
            elapsed = time.perf_counter() - start
            ok = elapsed < limit_s
            detail = f"{elapsed:.2f}s (limit {limit_s}s)"
            assert ok, f"criterion {number} took {elapsed:.2f}s, limit {limit_s}s"
        except Exception as exc:
            detail = detail or f"{type(exc).__name__}: {exc}"
            raise
        finally:
            with capsys.disabled():
                print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} - {detail}")

    return check


def test_criterion_1_job_costs(criterion):
    with criterion(1, "three-environment job cost totals", 1.0):
        cases = [
            (CostScenario("HPC", 0.0096, 6, 375.5), 0.36),
            (CostScenario("Cloud", 0.1856, 6, 355.2), 6.59),
            (CostScenario("Local", amortized_hourly_rate(4000, 5), 6, 386.0), 3.53),
        ]
        for scenario, expected in cases:
            result = compute_job_cost(scenario)
            assert abs(result.total_dollars - expected) <= 0.005, (scenario.label, result.total_dollars)
            assert result.display() == f"{expected:.2f}"


def test_criterion_2_amortized_rate_and_storage(criterion):
    with criterion(2, "amortized hourly rate and annual storage", 1.0):
        assert round_half_up(amortized_hourly_rate(4000, 5), 4) == Decimal("0.0913")
        assert storage_cost_annual(400, 180) == 72000


def test_criterion_3_network_harness(criterion, tmp_path):
    with criterion(3, "throughput/latency harness properties", 30.0):
        tp = measure_throughput(tmp_path, tmp_path, 16 * 1024 * 1024, 20)
        assert tp.n == 20 and len(tp.trials) == 20
        assert tp.mean_gbps > 0 and tp.stdev_gbps >= 0

        with EchoServer() as server:
            lat = measure_latency(server.endpoint, 64, 100)
        assert lat.n == 100 and len(lat.trials) == 100
        assert lat.mean_ms > 0 and lat.stdev_ms >= 0

        with EchoServer(delay_s=0.001) as server:
            delayed = measure_latency(server.endpoint, 64, 100)
        assert 1.0 <= delayed.mean_ms <= 1.5, delayed.mean_ms

        assert gbps(10**9, 1.000) == 8.000


def test_criterion_4_query_correctness(criterion, tmp_path, spec, image_store):
    with criterion(4, "query items, ineligibility and partition", 30.0):
        ds = make_dataset(tmp_path / "a", missing_t1w={("02", "01")})
        manifest, bundle = plan_bundle(ds, spec, image_store[0], tmp_path / "work")
        assert len(manifest.items) == 5 and len(manifest.ineligible) == 1
        (rec,) = manifest.ineligible
        assert rec.cause_kind == MISSING_RAW_INPUT
        assert "no available T1w image" in rec.cause_text

        # a clean run over all six sessions leaves nothing to do
        full = make_dataset(tmp_path / "b")
        manifest, bundle = plan_bundle(full, spec, image_store[0], tmp_path / "work_b")
        assert len(manifest.items) == 6
        report = run_bundle(bundle, SimCluster(n_slots=3))
        assert not report.failed
        again = build_manifest(index_dataset(full), spec)
        assert len(again.items) == 0
        assert [r.cause_code for r in again.ineligible] == [ALREADY_COMPLETE] * 6

        for seed in range(100):
            rng = random.Random(seed)
            root, n_sessions, _ = random_dataset(tmp_path / "rand" / str(seed), rng)
            index = index_dataset(root)
            m = build_manifest(index, spec)
            assert len(m.items) + len(m.ineligible) == len(index.sessions) == n_sessions


def test_criterion_5_end_to_end_bundle(criterion, tmp_path, spec, image_store):
    with criterion(5, "end-to-end simulated bundle with provenance", 60.0):
        ds = make_dataset(tmp_path)
        manifest, bundle = plan_bundle(ds, spec, image_store[0], tmp_path / "work")
        assert len(manifest.items) == 6
        lines = bundle.array_script.read_text().splitlines()
        assert "#SBATCH --array=0-5" in lines

        report = run_bundle(bundle, SimCluster(n_slots=2))
        assert report.done == list(range(6))
        records = sorted(ds.glob(f"derivatives/stubpipe/sub-*/ses-*/{PROVENANCE_NAME}"))
        assert len(records) == 6
        for path in records:
            rec = read_provenance(path.parent)
            assert rec.pipeline_name == "stubpipe" and rec.user
            for ts in (rec.started_at, rec.finished_at):
                assert re.fullmatch(r"\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ", ts)
                parse_timestamp(ts)
            assert rec.inputs and all(re.fullmatch(r"[0-9a-f]{64}", e.digest) for e in rec.inputs)
            assert all(e.path.startswith("sub-") for e in rec.inputs)
        assert assert_archive_consistency(ds, scratch_root=tmp_path / "work" / "scratch") == []


def test_criterion_6_integrity_enforcement(criterion, tmp_path, spec, image_store):
    with criterion(6, "corrupted stage-in terminates the job", 30.0):
        ds = make_dataset(tmp_path)
        manifest, bundle = plan_bundle(ds, spec, image_store[0], tmp_path / "work")
        report = run_bundle(bundle, SimCluster(n_slots=2, failure_plan={3: "corrupt_stage_in"}))
        bad = report.instances[3]
        assert bad.final_state == "failed" and bad.exit_code == 10
        item = manifest.items[3]
        out = ds / item.output_dir
        assert not (out / PROVENANCE_NAME).exists()
        assert is_complete(out) is CompletionState.ABSENT
        assert report.done == [0, 1, 2, 4, 5]


def _random_entity_set(rng):
    alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"

    def label():
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 8)))

    def maybe(f):
        return f() if rng.random() < 0.5 else None

    suffix = rng.choice(("T1w", "dwi"))
    exts = (".nii.gz", ".json", ".bval", ".bvec") if suffix == "dwi" else (".nii.gz", ".json")
    return EntitySet(
        subject=label(),
        suffix=suffix,
        extension=rng.choice(exts),
        session=maybe(label),
        acquisition=maybe(label),
        direction=maybe(label),
        run=maybe(lambda: rng.randint(1, 10_000)),
    )


def test_criterion_7_bids_grammar(criterion):
    with criterion(7, "BIDS name round-trip, rejection and derivative layout", 10.0):
        rng = random.Random(2024)
        failures = 0
        for _ in range(10_000):
            e = _random_entity_set(rng)
            if parse_bids_name(format_bids_name(e)) != e:
                failures += 1
            parts = derivative_dir("pipe", e.subject, e.session).split("/")
            assert "anat" not in parts and "dwi" not in parts
        assert failures == 0

        assert len(MALFORMED_NAMES) == 50
        for name in MALFORMED_NAMES:
            with pytest.raises(MalformedName):
                parse_bids_name(name)


def test_criterion_8_idempotent_ingest(criterion, tmp_path):
    with criterion(8, "applying a link-farm plan twice changes nothing", 10.0):
        conv = tmp_path / "conv"
        conv.mkdir()
        scans = []
        for i in range(1, 4):
            for suffix, exts in (("T1w", (".json",)), ("dwi", (".json", ".bval", ".bvec"))):
                base = conv / f"s{i}_{suffix}"
                (conv / f"{base.name}.nii.gz").write_bytes(f"{suffix} image {i}".encode())
                for ext in exts:
                    (conv / f"{base.name}{ext}").write_bytes(f"{suffix}{ext} {i}".encode())
                meta = RawScanMeta(str(conv / f"{base.name}.nii.gz"), suffix, (1, 1, 1), (256, 256, 176))
                label = "T1w" if suffix == "T1w" else "DWI"
                scans.append((meta, label, EntitySet(f"{i:02d}", suffix, ".nii.gz", session="01")))
        plan = plan_ingest(scans, StorageTier("general", str(tmp_path / "tier")), tmp_path / "ds")

        first = apply_ingest(plan)
        assert first.created == len(plan.entries) == 18
        snapshot = tree_digest(tmp_path)
        second = apply_ingest(plan)
        assert second.skipped == len(plan.entries) and second.created == 0
        assert tree_digest(tmp_path) == snapshot
