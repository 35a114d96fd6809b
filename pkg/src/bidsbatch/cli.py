"""``bidsbatch`` command line.

Exit codes: 0 success, 1 verification found problems / a run failed,
2 bad input tree or arguments, 3 unknown pipeline, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from bidsbatch import __version__
from bidsbatch._toml import toml
from bidsbatch import bench, bids, ingest, integrity, query, registry, scriptgen, simsched, status
from bidsbatch.errors import BidsBatchError, ConfigError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_UNKNOWN_PIPELINE = 3
EXIT_IO = 4

logger = logging.getLogger("bidsbatch")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_config(path) -> dict:
    if path is None:
        path = os.environ.get("BIDSBATCH_CONFIG")
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return toml.load(fh)
    except (OSError, toml.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _setting(args, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return args.config.get(name, default)


def _emit(args, human: str, payload) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    elif not args.quiet and human:
        print(human, end="" if human.endswith("\n") else "\n")


def _dataset_path(args, dataset: str) -> Path:
    p = Path(dataset)
    archive_root = _setting(args, "archive_root")
    if not p.exists() and not p.is_absolute() and archive_root:
        p = Path(archive_root) / dataset
    return p


def _index(args, dataset: str) -> bids.DatasetIndex:
    try:
        index = bids.index_dataset(_dataset_path(args, dataset))
    except (bids.RootNotFound, bids.NotADataset) as exc:
        raise CommandError(str(exc), EXIT_BAD_INPUT) from exc
    if not args.quiet:
        for w in index.warnings:
            print(w, file=sys.stderr)
    return index


def _registry(args) -> list:
    path = _setting(args, "registry")
    if not path:
        raise CommandError("no registry given (--registry or config 'registry')", EXIT_BAD_INPUT)
    try:
        return registry.load_registry(path)
    except registry.RegistryError as exc:
        raise CommandError(str(exc), EXIT_BAD_INPUT) from exc


# -- commands ----------------------------------------------------------------


def cmd_index(args) -> int:
    index = _index(args, args.dataset)
    s = index.summary()
    human = f"{s['dataset']}: {s['sessions']} sessions, {s['files']} files, {s['derivative_runs']} derivative runs"
    if s["warnings"]:
        human += f", {s['warnings']} warnings"
    _emit(args, human, s)
    return EXIT_OK


def _tier(args) -> ingest.StorageTier:
    tiers = args.config.get("tiers", {})
    conf = dict(tiers.get(args.tier, {}))
    if args.tier_root:
        conf["root"] = args.tier_root
    if "root" not in conf:
        raise CommandError(f"no root configured for tier {args.tier!r}", EXIT_BAD_INPUT)
    return ingest.StorageTier(args.tier, conf["root"], bool(conf.get("authorized", args.tier == "general")))


def cmd_ingest_plan(args) -> int:
    rules = ingest.load_rules(args.rules)
    scans = ingest.scans_from_json(args.scans, rules)
    plan = ingest.plan_ingest(scans, _tier(args), _dataset_path(args, args.dataset))
    Path(args.out).write_text(plan.to_json(), encoding="utf-8")
    _emit(args, f"{len(plan.entries)} entries planned -> {args.out}", {"entries": len(plan.entries), "plan": args.out})
    return EXIT_OK


def cmd_ingest_apply(args) -> int:
    plan = ingest.LinkFarmPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    report = ingest.apply_ingest(plan)
    if args.report:
        report.write_csv(args.report)
    summary = {"created": report.created, "skipped": report.skipped, "created_files": report.created_files}
    _emit(args, f"{report.created} links created, {report.created_files} files stored, {report.skipped} skipped", summary)
    return EXIT_OK


def cmd_plan(args) -> int:
    specs = _registry(args)
    try:
        spec = registry.find_spec(specs, args.pipeline)
    except registry.UnknownPipeline as exc:
        raise CommandError(str(exc), EXIT_UNKNOWN_PIPELINE) from exc
    image_store = _setting(args, "image_store")
    if not image_store:
        raise CommandError("no image store given (--image-store or config 'image_store')", EXIT_BAD_INPUT)
    if not args.skip_image_check:
        try:
            registry.validate_spec(spec, image_store)
        except (registry.ImageMissing, registry.ImageDigestMismatch) as exc:
            raise CommandError(str(exc), EXIT_IO) from exc

    index = _index(args, args.dataset)
    manifest = query.build_manifest(index, spec)
    out = Path(args.out)
    csv_path = query.write_ineligibility_csv(manifest, out / "ineligible.csv")
    result = {
        "items": len(manifest.items),
        "ineligible": len(manifest.ineligible),
        "ineligible_csv": str(csv_path),
        "scripts_dir": None,
        "submit": None,
    }
    if not manifest.items:
        _emit(args, f"nothing to run: 0 items, {len(manifest.ineligible)} ineligible (see {csv_path})", result)
        return EXIT_OK

    submit = scriptgen.SubmitSpec(
        partition=_setting(args, "partition", "production"),
        scratch_root=str(Path(_setting(args, "scratch_root", "/tmp/bidsbatch-scratch")).resolve()),
        account=_setting(args, "account"),
        array_throttle=_setting(args, "throttle"),
        notify_email=_setting(args, "email"),
    )
    bundle = scriptgen.generate_bundle(
        manifest,
        spec,
        submit,
        out / "scripts",
        image_store=image_store,
        max_parallel=_setting(args, "max_parallel", 4),
    )
    submit_cmd = f"cd {bundle.scripts_dir} && sbatch {scriptgen.ARRAY_SCRIPT}"
    result.update(scripts_dir=str(bundle.scripts_dir), submit=submit_cmd)
    human = (
        f"{len(manifest.items)} items, {len(manifest.ineligible)} ineligible (see {csv_path})\n"
        f"submit with: {submit_cmd}\n"
        f"or run locally: bidsbatch run-local {bundle.scripts_dir}\n"
    )
    _emit(args, human, result)
    return EXIT_OK


def cmd_run_local(args) -> int:
    bundle = scriptgen.GeneratedBundle.load(args.bundle)
    if not bundle.local_runner.is_file():
        raise CommandError(f"no local runner in {args.bundle}", EXIT_BAD_INPUT)
    cmd = [sys.executable, str(bundle.local_runner)]
    if args.max_parallel:
        cmd += ["--max-parallel", str(args.max_parallel)]
    code = subprocess.call(cmd)
    results = (bundle.scripts_dir / scriptgen.RESULTS_CSV)
    _emit(args, f"local run finished with exit {code}; results in {results}", {"exit_code": code, "results": str(results)})
    return EXIT_OK if code == 0 else EXIT_FAILED


def _parse_fault(text: str) -> tuple[int, str]:
    index, _, kind = text.partition(":")
    if kind not in simsched.FAULTS:
        raise argparse.ArgumentTypeError(f"fault must be INDEX:{'|'.join(simsched.FAULTS)}")
    return int(index), kind


def cmd_simulate(args) -> int:
    bundle = scriptgen.GeneratedBundle.load(args.bundle)
    cluster = simsched.SimCluster(n_slots=args.slots, failure_plan=dict(args.fault or []), seed=args.seed)
    report = simsched.run_bundle(bundle, cluster)
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    human = "\n".join(
        f"instance_{r.index}: {r.final_state} exit={r.exit_code} phase={r.phase_reached} t=[{r.start},{r.end})"
        for r in report.instances
    )
    human += f"\n{len(report.done)} done, {len(report.failed)} failed"
    _emit(args, human, report.to_dict())
    return EXIT_OK if not report.failed else EXIT_FAILED


def cmd_verify(args) -> int:
    root = _dataset_path(args, args.dataset)
    if not root.is_dir():
        raise CommandError(f"dataset root not found: {root}", EXIT_BAD_INPUT)
    violations = simsched.assert_archive_consistency(root, scratch_root=args.scratch_root)
    human = "ok" if not violations else "\n".join(f"VIOLATION {v}" for v in violations)
    _emit(args, human, {"ok": not violations, "violations": violations})
    return EXIT_OK if not violations else EXIT_FAILED


def cmd_storage_report(args) -> int:
    root = args.archive or _setting(args, "archive_root")
    if not root:
        raise CommandError("no archive root given", EXIT_BAD_INPUT)
    if not Path(root).is_dir():
        raise CommandError(f"archive root not found: {root}", EXIT_BAD_INPUT)
    report = status.storage_report(root)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    _emit(args, report.to_table(), report.to_dict())
    return EXIT_OK


def cmd_queue_report(args) -> int:
    if args.sim_report:
        sim = simsched.SimReport.from_dict(json.loads(Path(args.sim_report).read_text()))
        report = status.queue_from_sim(sim, args.at, args.pipeline or "sim")
    else:
        text = sys.stdin.read() if args.squeue == "-" else Path(args.squeue).read_text()
        report = status.parse_queue_text(text)
        if not args.quiet:
            for w in report.warnings:
                print(f"WARN {w}", file=sys.stderr)
    _emit(args, report.to_table(), report.to_dict())
    return EXIT_OK


def _parse_scenario(text: str) -> bench.CostScenario:
    try:
        label, rate, n, minutes = text.split(":")
        return bench.CostScenario(label, float(rate), int(n), float(minutes))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("scenario must be LABEL:RATE_PER_HOUR:N_JOBS:MINUTES") from exc


def _parse_workstation(text: str) -> bench.CostScenario:
    try:
        label, price, years, n, minutes = text.split(":")
        rate = bench.amortized_hourly_rate(float(price), float(years))
        return bench.CostScenario(label, rate, int(n), float(minutes))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("workstation must be LABEL:PRICE:YEARS:N_JOBS:MINUTES") from exc


def cmd_bench_cost(args) -> int:
    scenarios = list(args.scenario or []) + list(args.workstation or [])
    if args.preset == "reference" or not scenarios:
        scenarios = bench.reference_scenarios() + scenarios
    rows = [bench.BenchRow(s.label, s) for s in scenarios]
    text, csv_text = bench.comparison_table(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    payload = {
        "scenarios": [
            {**s.__dict__, "total_dollars": bench.compute_job_cost(s).total_dollars,
             "total_display": bench.compute_job_cost(s).display()}
            for s in scenarios
        ]
    }
    if args.storage_tb is not None:
        annual = bench.storage_cost_annual(args.storage_tb, args.tb_year_rate)
        payload["storage_annual_dollars"] = annual
        text += f"\nStorage: {args.storage_tb:g} TB at ${args.tb_year_rate:g}/TB/year = ${bench.round_half_up(annual, 2)}/year\n"
    if args.archive_gb is not None:
        annual = bench.archive_storage_cost(args.archive_gb, args.gb_month_rate, 12)
        payload["archive_annual_dollars"] = annual
        text += f"Archive backup: {args.archive_gb:g} GB at ${args.gb_month_rate:g}/GB/month = ${bench.round_half_up(annual, 2)}/year\n"
    _emit(args, text, payload)
    return EXIT_OK


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_bench_net(args) -> int:
    import tempfile

    nbytes, trials = (
        (bench.FULL_BYTES_PER_TRIAL, bench.FULL_TRIALS) if args.full else (args.bytes, args.trials)
    )
    with tempfile.TemporaryDirectory() as tmp:
        src = args.src_dir or tmp
        dst = args.dst_dir or tmp
        tp = bench.measure_throughput(src, dst, nbytes, trials)
    if args.endpoint:
        lat = bench.measure_latency(_endpoint(args.endpoint), args.payload, args.latency_trials)
    else:
        with bench.EchoServer() as server:
            lat = bench.measure_latency(server.endpoint, args.payload, args.latency_trials)
    scenario = bench.CostScenario(args.label, args.rate, 0, 0.0)
    text, csv_text = bench.comparison_table([bench.BenchRow(args.label, scenario, tp, lat)])
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    payload = {
        "throughput": {k: v for k, v in tp.__dict__.items() if k != "trials"},
        "latency": {k: v for k, v in lat.__dict__.items() if k != "trials"},
        "latency_kind": "round-trip",
        "stdev_kind": "sample",
    }
    _emit(args, text, payload)
    return EXIT_OK


def cmd_bench_echo(args) -> int:
    server = bench.EchoServer(args.host, args.port, args.delay_ms / 1000.0)
    if not args.quiet:
        print(f"echo responder on {server.endpoint[0]}:{server.endpoint[1]}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bidsbatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bidsbatch {__version__}")
    p.add_argument("--config", help="TOML file with defaults (or $BIDSBATCH_CONFIG)")
    p.add_argument("--archive-root", dest="archive_root", help="parent folder of all datasets")
    p.add_argument("--registry", help="directory of pipeline spec files")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--quiet", action="store_true", help="suppress human output and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", help="index a BIDS dataset and summarize it")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("ingest", help="classify scans and build the link farm")
    isub = s.add_subparsers(dest="ingest_command", required=True)
    t = isub.add_parser("plan")
    t.add_argument("--rules", required=True, help="classification rules TOML")
    t.add_argument("--scans", required=True, help="JSON list of converted scans")
    t.add_argument("--dataset", required=True, help="BIDS dataset directory to populate")
    t.add_argument("--tier", choices=("general", "restricted"), default="general")
    t.add_argument("--tier-root", help="override the configured tier root")
    t.add_argument("--out", required=True, help="plan JSON to write")
    t.set_defaults(func=cmd_ingest_plan)
    t = isub.add_parser("apply")
    t.add_argument("plan")
    t.add_argument("--report", help="CSV report path (link_path,real_path,action)")
    t.set_defaults(func=cmd_ingest_apply)

    s = sub.add_parser("plan", help="query a dataset and generate job scripts")
    s.add_argument("dataset")
    s.add_argument("pipeline")
    s.add_argument("--out", required=True, help="output directory for scripts and CSV")
    s.add_argument("--image-store", dest="image_store")
    s.add_argument("--skip-image-check", action="store_true")
    s.add_argument("--partition")
    s.add_argument("--account")
    s.add_argument("--throttle", type=int, help="max concurrent array tasks")
    s.add_argument("--scratch-root", dest="scratch_root")
    s.add_argument("--email")
    s.add_argument("--max-parallel", dest="max_parallel", type=int, help="local runner default")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("run-local", help="run a bundle on this machine (burst mode)")
    s.add_argument("bundle")
    s.add_argument("--max-parallel", type=int)
    s.set_defaults(func=cmd_run_local)

    s = sub.add_parser("simulate", help="run a bundle on the simulated cluster")
    s.add_argument("bundle")
    s.add_argument("--slots", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fault", type=_parse_fault, action="append", help="INDEX:KIND, repeatable")
    s.add_argument("--report", help="write the SimReport JSON here")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", help="check provenance and derivative consistency")
    s.add_argument("dataset")
    s.add_argument("--scratch-root")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("storage-report", help="bytes, files and raw images per dataset")
    s.add_argument("archive", nargs="?")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_storage_report)

    s = sub.add_parser("queue-report", help="normalized job queue status")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--sim-report", help="SimReport JSON from 'simulate --report'")
    src.add_argument("--squeue", help="file (or - for stdin) with 'JOBID STATE NAME' lines")
    s.add_argument("--at", type=int, default=0, help="virtual time for sim snapshots")
    s.add_argument("--pipeline")
    s.set_defaults(func=cmd_queue_report)

    s = sub.add_parser("bench", help="network and cost benchmarks")
    bsub = s.add_subparsers(dest="bench_command", required=True)
    t = bsub.add_parser("cost")
    t.add_argument("--preset", choices=("reference",))
    t.add_argument("--scenario", type=_parse_scenario, action="append", help="LABEL:RATE:N:MINUTES")
    t.add_argument("--workstation", type=_parse_workstation, action="append", help="LABEL:PRICE:YEARS:N:MINUTES")
    t.add_argument("--storage-tb", type=float)
    t.add_argument("--tb-year-rate", type=float, default=180.0)
    t.add_argument("--archive-gb", type=float)
    t.add_argument("--gb-month-rate", type=float, default=0.0036)
    t.add_argument("--csv")
    t.set_defaults(func=cmd_bench_cost)
    t = bsub.add_parser("net")
    t.add_argument("--src-dir")
    t.add_argument("--dst-dir")
    t.add_argument("--bytes", type=int, default=bench.CI_BYTES_PER_TRIAL)
    t.add_argument("--trials", type=int, default=bench.CI_TRIALS)
    t.add_argument("--full", action="store_true", help="1 GB x 100 trials")
    t.add_argument("--endpoint", help="HOST:PORT of an echo responder (default: built-in loopback)")
    t.add_argument("--payload", type=int, default=bench.DEFAULT_PAYLOAD)
    t.add_argument("--latency-trials", type=int, default=100)
    t.add_argument("--label", default="local")
    t.add_argument("--rate", type=float, default=0.0, help="cost per hour for the table")
    t.add_argument("--csv")
    t.set_defaults(func=cmd_bench_net)
    t = bsub.add_parser("echo-server")
    t.add_argument("--host", default="127.0.0.1")
    t.add_argument("--port", type=int, default=7007)
    t.add_argument("--delay-ms", type=float, default=0.0)
    t.set_defaults(func=cmd_bench_echo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(message)s")
    # index warnings are printed by the CLI itself
    logging.getLogger("bidsbatch.bids").setLevel(logging.ERROR)
    try:
        args.config = load_config(args.config)
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except BidsBatchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, (integrity.IntegrityError, ingest.TierUnwritable)) else EXIT_BAD_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
