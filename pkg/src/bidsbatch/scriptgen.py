"""Emit per-session job scripts, a SLURM array script and a local runner.

A bundle directory looks like::

    instance_0.sh ... instance_<n-1>.sh
    submit_array.sh     # sbatch submit_array.sh (from inside the bundle)
    run_local.py        # burst mode: python3 run_local.py --max-parallel 4
    manifest.json
    logs/

Instance scripts exit with a phase-specific code so failures can be triaged
from scheduler accounting alone.
"""

from __future__ import annotations

import math
import os
import re
import shlex
import stat
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from bidsbatch.errors import BidsBatchError
from bidsbatch.query import RunManifest, WorkItem
from bidsbatch.registry import PipelineSpec, ResourceRequest, image_path

EXIT_SCRATCH = 5
EXIT_STAGE_IN = 10
EXIT_CONTAINER = 20
EXIT_STAGE_OUT = 30
EXIT_PROVENANCE = 40
EXIT_CLEANUP = 50
PHASES = ("scratch", "stage-in", "container", "stage-out", "provenance", "cleanup")
EXIT_CODES = dict(zip(PHASES, (EXIT_SCRATCH, EXIT_STAGE_IN, EXIT_CONTAINER, EXIT_STAGE_OUT, EXIT_PROVENANCE, EXIT_CLEANUP)))

ARRAY_SCRIPT = "submit_array.sh"
LOCAL_RUNNER = "run_local.py"
MANIFEST_NAME = "manifest.json"
RESULTS_CSV = "results.csv"

_PLACEHOLDER = re.compile(r"(?<!\$)\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ScriptGenError(BidsBatchError):
    pass


class TemplateError(ScriptGenError):
    pass


class EmptyManifest(ScriptGenError):
    pass


@dataclass(frozen=True)
class SubmitSpec:
    partition: str
    scratch_root: str
    account: Optional[str] = None
    array_throttle: Optional[int] = None
    notify_email: Optional[str] = None

    def __post_init__(self):
        if not os.path.isabs(self.scratch_root):
            raise ValueError(f"scratch_root must be absolute: {self.scratch_root!r}")
        if self.array_throttle is not None and self.array_throttle < 1:
            raise ValueError("array_throttle must be >= 1")


@dataclass(frozen=True)
class GeneratedBundle:
    scripts_dir: Path
    instance_scripts: tuple
    array_script: Path
    local_runner: Path
    manifest_ref: Path

    @classmethod
    def load(cls, scripts_dir: str | os.PathLike) -> "GeneratedBundle":
        """Re-open a bundle written by :func:`generate_bundle`."""
        d = Path(scripts_dir).resolve()
        instances = sorted(d.glob("instance_*.sh"), key=lambda p: int(p.stem.split("_")[1]))
        return cls(d, tuple(instances), d / ARRAY_SCRIPT, d / LOCAL_RUNNER, d / MANIFEST_NAME)


def format_walltime(minutes: int) -> str:
    """SLURM ``D-HH:MM:SS``."""
    days, rem = divmod(int(minutes), 24 * 60)
    hours, mins = divmod(rem, 60)
    return f"{days}-{hours:02d}:{mins:02d}:00"


def render_command(template: str) -> str:
    missing = [ph for ph in ("inputs_dir", "outputs_dir") if "{" + ph + "}" not in template]
    if missing:
        raise TemplateError(f"command_template lacks {', '.join('{' + m + '}' for m in missing)}")
    rendered = template.replace("{inputs_dir}", '"$INPUTS_DIR"').replace(
        "{outputs_dir}", '"$OUTPUTS_DIR"'
    )
    leftover = _PLACEHOLDER.findall(rendered)
    if leftover:
        raise TemplateError(f"unresolved placeholders: {', '.join(sorted(set(leftover)))}")
    return rendered


def scratch_name(item: WorkItem, tag: str) -> str:
    parts = [item.pipeline_name, item.subject]
    if item.session is not None:
        parts.append(item.session)
    parts.append(tag)
    return "_".join(parts)


def generate_instance_script(
    item: WorkItem,
    spec: PipelineSpec,
    submit: SubmitSpec,
    *,
    dataset_root: str,
    image_store: str,
    tag: str,
    array_index: int = 0,
) -> str:
    if item.pipeline_name != spec.name:
        raise ScriptGenError(f"work item is for {item.pipeline_name!r}, spec is {spec.name!r}")
    command = render_command(spec.command_template)
    q = shlex.quote
    session = item.session if item.session is not None else "-"
    lines = [
        "#!/bin/sh",
        f"# bidsbatch instance {array_index} manifest {tag}",
        f"# pipeline={spec.name} version={spec.version} subject={item.subject} session={session}",
        "set -u",
        "",
        'PY="${BIDSBATCH_PYTHON:-python3}"',
        'STAGE="${SIMSCHED_STAGE_CMD:-$PY -m bidsbatch.integrity}"',
        f"DATASET_ROOT={q(str(dataset_root))}",
        f"IMAGE={q(str(image_path(spec, image_store)))}",
        f"SCRATCH_ROOT={q(submit.scratch_root)}",
        f'SCRATCH="$SCRATCH_ROOT"/{q(scratch_name(item, tag))}',
        f'OUTPUT_DIR="$DATASET_ROOT"/{q(item.output_dir)}',
        'INPUTS_DIR="$SCRATCH/inputs"',
        'OUTPUTS_DIR="$SCRATCH/outputs"',
        'CONTAINER="${SIMSCHED_CONTAINER_CMD:-singularity exec --cleanenv --bind $SCRATCH}"',
        "export INPUTS_DIR OUTPUTS_DIR",
        "STARTED_AT=$(date -u +%Y-%m-%dT%H:%M:%SZ)",
        "",
        "ok() { echo \"bidsbatch: phase=$1 status=ok\"; }",
        "fail() {",
        '    echo "bidsbatch: phase=$1 status=failed exit=$2" >&2',
        '    [ "${3:-}" = keep ] || rm -rf "$SCRATCH"',
        '    exit "$2"',
        "}",
        "",
        "# 1. scratch",
        f'mkdir -p "$SCRATCH_ROOT" && mkdir "$SCRATCH" || fail scratch {EXIT_SCRATCH} keep',
        f'mkdir "$INPUTS_DIR" "$OUTPUTS_DIR" || fail scratch {EXIT_SCRATCH}',
        "ok scratch",
        "",
        "# 2. stage-in",
    ]
    for rel in item.resolved_inputs:
        lines.append(
            f'$STAGE stage-in --receipts "$SCRATCH/stage_in.jsonl" '
            f'"$DATASET_ROOT"/{q(rel)} "$INPUTS_DIR"/{q(rel)} || fail stage-in {EXIT_STAGE_IN}'
        )
    lines += [
        "ok stage-in",
        "",
        "# 3. container",
        f'$CONTAINER "$IMAGE" {command} || fail container {EXIT_CONTAINER}',
        "ok container",
        "",
        "# 4. stage-out",
        f'$STAGE stage-out --receipts "$SCRATCH/stage_out.jsonl" "$OUTPUTS_DIR" "$OUTPUT_DIR" '
        f"|| fail stage-out {EXIT_STAGE_OUT}",
        "ok stage-out",
        "",
        "# 5. provenance",
        '$STAGE provenance --output-dir "$OUTPUT_DIR" --dataset-root "$DATASET_ROOT" \\',
        f"    --pipeline {q(spec.name)} --version {q(spec.version)} \\",
        f'    --container-digest {spec.container_digest} --started-at "$STARTED_AT" \\',
        '    --inputs "$SCRATCH/stage_in.jsonl" --outputs "$SCRATCH/stage_out.jsonl" '
        f"|| fail provenance {EXIT_PROVENANCE}",
        "ok provenance",
        "",
        "# 6. cleanup",
        f'rm -rf "$SCRATCH" || fail cleanup {EXIT_CLEANUP} keep',
        "ok cleanup",
        "exit 0",
        "",
    ]
    return "\n".join(lines)


def generate_array_script(
    n_items: int,
    resources: ResourceRequest,
    submit: SubmitSpec,
    *,
    job_name: str = "bidsbatch",
) -> str:
    if n_items < 1:
        raise EmptyManifest("no work items; nothing to submit")
    array = f"0-{n_items - 1}" if n_items > 1 else "0"
    if submit.array_throttle:
        array += f"%{submit.array_throttle}"
    lines = [
        "#!/bin/sh",
        f"#SBATCH --job-name={job_name}",
        f"#SBATCH --array={array}",
        f"#SBATCH --cpus-per-task={resources.cpus}",
        f"#SBATCH --mem={math.ceil(resources.memory_gb)}G",
        f"#SBATCH --time={format_walltime(resources.walltime_minutes)}",
        f"#SBATCH --partition={submit.partition}",
    ]
    if submit.account:
        lines.append(f"#SBATCH --account={submit.account}")
    if submit.notify_email:
        lines += ["#SBATCH --mail-type=FAIL", f"#SBATCH --mail-user={submit.notify_email}"]
    lines += [
        "#SBATCH --output=logs/instance_%a.out",
        "#SBATCH --error=logs/instance_%a.err",
        "",
        'ARRAY_INDEX="${SLURM_ARRAY_TASK_ID:?must run as a SLURM array task}"',
        'cd "${SLURM_SUBMIT_DIR:-.}" || exit 1',
        'exec sh "./instance_${ARRAY_INDEX}.sh"',
        "",
    ]
    return "\n".join(lines)


_RUNNER_TEMPLATE = '''#!/usr/bin/env python3
"""Burst-mode runner: execute instance scripts locally with bounded parallelism."""
import argparse
import csv
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

N_INSTANCES = {n_items}
DEFAULT_MAX_PARALLEL = {max_parallel}
HERE = Path(__file__).resolve().parent


def run_instance(i):
    logs = HERE / "logs"
    logs.mkdir(exist_ok=True)
    start = time.monotonic()
    with open(logs / f"instance_{{i}}.out", "w") as out, open(logs / f"instance_{{i}}.err", "w") as err:
        code = subprocess.call(["sh", str(HERE / f"instance_{{i}}.sh")], stdout=out, stderr=err)
    return i, code, time.monotonic() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--max-parallel", type=int, default=DEFAULT_MAX_PARALLEL)
    args = parser.parse_args()
    if args.max_parallel < 1:
        parser.error("--max-parallel must be >= 1")
    with ThreadPoolExecutor(max_workers=args.max_parallel) as pool:
        results = sorted(pool.map(run_instance, range(N_INSTANCES)))
    with open(HERE / "{results_csv}", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\\n")
        writer.writerow(["instance", "exit_code", "seconds"])
        for i, code, seconds in results:
            writer.writerow([i, code, f"{{seconds:.3f}}"])
    failed = [i for i, code, _ in results if code != 0]
    for i in failed:
        print(f"instance {{i}} failed", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
'''


def generate_local_runner(n_items: int, max_parallel: int) -> str:
    if n_items < 1:
        raise EmptyManifest("no work items; nothing to run")
    if max_parallel < 1:
        raise ValueError("max_parallel must be >= 1")
    return _RUNNER_TEMPLATE.format(
        n_items=n_items, max_parallel=max_parallel, results_csv=RESULTS_CSV
    )


def _write(path: Path, text: str, executable: bool = False) -> Path:
    path.write_text(text, encoding="utf-8")
    if executable:
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path


def generate_bundle(
    manifest: RunManifest,
    spec: PipelineSpec,
    submit: SubmitSpec,
    scripts_dir: str | os.PathLike,
    *,
    image_store: str | os.PathLike,
    max_parallel: int = 4,
) -> GeneratedBundle:
    """Write all scripts for ``manifest`` into ``scripts_dir``."""
    if not manifest.items:
        raise EmptyManifest("manifest has no work items")
    scripts_dir = Path(scripts_dir)
    scripts_dir.mkdir(parents=True, exist_ok=True)
    (scripts_dir / "logs").mkdir(exist_ok=True)
    tag = manifest.content_hash()[:8]
    image_store = str(Path(image_store).resolve())

    instances = []
    for i, item in enumerate(manifest.items):
        text = generate_instance_script(
            item,
            spec,
            submit,
            dataset_root=manifest.dataset_root,
            image_store=image_store,
            tag=tag,
            array_index=i,
        )
        instances.append(_write(scripts_dir / f"instance_{i}.sh", text, executable=True))

    n = len(instances)
    array = _write(
        scripts_dir / ARRAY_SCRIPT,
        generate_array_script(n, spec.resources, submit, job_name=spec.name),
        executable=True,
    )
    runner = _write(
        scripts_dir / LOCAL_RUNNER, generate_local_runner(n, max_parallel), executable=True
    )
    manifest_ref = _write(scripts_dir / MANIFEST_NAME, manifest.to_json())
    return GeneratedBundle(scripts_dir, tuple(instances), array, runner, manifest_ref)
