"""Deterministic stand-in for a SLURM cluster.

The simulator runs the *real* generated instance scripts, with the
container call redirected to :mod:`bidsbatch.simsched.stub` and, for
integrity faults, staging routed through :mod:`bidsbatch.simsched.shim`.
Scheduling happens in virtual time: each phase an instance completes takes
1-3 steps drawn from ``random.Random(seed)``, and at most
``min(n_slots, array throttle)`` instances occupy a slot at once.
"""

from __future__ import annotations

import heapq
import json
import os
import random
import re
import shlex
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import bidsbatch
from bidsbatch.bids import derivative_run_dirs
from bidsbatch.errors import BidsBatchError
from bidsbatch.integrity import PROVENANCE_NAME, CompletionState, is_complete
from bidsbatch.scriptgen import EXIT_CODES, PHASES, GeneratedBundle

FAULTS = ("none", "corrupt_stage_in", "kill_container", "corrupt_stage_out")
KILL_EXIT_CODE = 137
_THROTTLE = re.compile(r"^#SBATCH --array=\S*?%(\d+)\s*$", re.M)
_PHASE_OK = re.compile(r"^bidsbatch: phase=(\S+) status=ok$", re.M)


class BundleMalformed(BidsBatchError):
    pass


@dataclass(frozen=True)
class SimCluster:
    n_slots: int = 1
    failure_plan: dict = field(default_factory=dict)
    seed: int = 0
    container_cmd: Optional[str] = None

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        for index, fault in self.failure_plan.items():
            if fault not in FAULTS:
                raise ValueError(f"unknown fault {fault!r} for instance {index}")


@dataclass(frozen=True)
class InstanceResult:
    index: int
    final_state: str
    exit_code: int
    phase_reached: str
    start: int
    end: int


@dataclass(frozen=True)
class SimReport:
    instances: tuple
    wall_order: tuple

    @property
    def done(self) -> list:
        return [r.index for r in self.instances if r.final_state == "done"]

    @property
    def failed(self) -> list:
        return [r.index for r in self.instances if r.final_state == "failed"]

    def state_at(self, t: int) -> dict:
        """Queue state of every instance at virtual time ``t``."""
        states = {}
        for r in self.instances:
            if t < r.start:
                states[r.index] = "pending"
            elif t < r.end:
                states[r.index] = "running"
            else:
                states[r.index] = r.final_state
        return states

    def max_running(self) -> int:
        times = sorted({r.start for r in self.instances})
        return max((sum(1 for s in self.state_at(t).values() if s == "running") for t in times), default=0)

    def to_dict(self) -> dict:
        return {
            "instances": [asdict(r) for r in self.instances],
            "wall_order": [list(e) for e in self.wall_order],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        return cls(
            instances=tuple(InstanceResult(**r) for r in d["instances"]),
            wall_order=tuple(tuple(e) for e in d["wall_order"]),
        )


def _python_cmd(module: str, *extra: str) -> str:
    return " ".join([shlex.quote(sys.executable), "-m", module, *extra])


def _instance_env(cluster: SimCluster, fault: str) -> dict:
    env = dict(os.environ)
    src = str(Path(bidsbatch.__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    env["BIDSBATCH_PYTHON"] = sys.executable
    env["SIMSCHED_CONTAINER_CMD"] = (
        cluster.container_cmd
        or os.environ.get("SIMSCHED_CONTAINER_CMD")
        or _python_cmd("bidsbatch.simsched.stub")
    )
    env.pop("SIMSCHED_STAGE_CMD", None)
    if fault == "kill_container":
        env["SIMSCHED_CONTAINER_CMD"] = _python_cmd(
            "bidsbatch.simsched.stub", "--exit", str(KILL_EXIT_CODE)
        )
    elif fault == "corrupt_stage_in":
        env["SIMSCHED_STAGE_CMD"] = _python_cmd("bidsbatch.simsched.shim", "--corrupt", "stage-in")
    elif fault == "corrupt_stage_out":
        env["SIMSCHED_STAGE_CMD"] = _python_cmd("bidsbatch.simsched.shim", "--corrupt", "stage-out")
    return env


def _check_bundle(bundle: GeneratedBundle) -> int:
    scripts = list(bundle.instance_scripts)
    if not scripts:
        raise BundleMalformed(f"{bundle.scripts_dir}: no instance scripts")
    for i, path in enumerate(scripts):
        if Path(path).name != f"instance_{i}.sh" or not Path(path).is_file():
            raise BundleMalformed(f"instance script {i} missing or misnamed: {path}")
    if not Path(bundle.array_script).is_file():
        raise BundleMalformed(f"array script missing: {bundle.array_script}")
    return len(scripts)


def array_throttle(bundle: GeneratedBundle) -> Optional[int]:
    m = _THROTTLE.search(Path(bundle.array_script).read_text())
    return int(m.group(1)) if m else None


def _execute(script: Path, env: dict) -> tuple[int, list]:
    script = script.resolve()
    proc = subprocess.run(
        ["sh", str(script)], env=env, capture_output=True, text=True, cwd=script.parent
    )
    log_dir = script.parent / "logs"
    log_dir.mkdir(exist_ok=True)
    (log_dir / f"{script.stem}.sim.out").write_text(proc.stdout)
    (log_dir / f"{script.stem}.sim.err").write_text(proc.stderr)
    return proc.returncode, _PHASE_OK.findall(proc.stdout)


def _failed_phase(exit_code: int, completed: list) -> str:
    for phase, code in EXIT_CODES.items():
        if code == exit_code:
            return phase
    return PHASES[len(completed)] if len(completed) < len(PHASES) else PHASES[-1]


def run_bundle(bundle: GeneratedBundle, cluster: SimCluster) -> SimReport:
    """Run every instance of ``bundle`` on the simulated cluster."""
    n = _check_bundle(bundle)
    bad = [i for i in cluster.failure_plan if not 0 <= int(i) < n]
    if bad:
        raise BundleMalformed(f"failure plan indices outside bundle range: {bad}")
    throttle = array_throttle(bundle)
    capacity = min(cluster.n_slots, throttle) if throttle else cluster.n_slots
    rng = random.Random(cluster.seed)

    # Instances share no paths, so executing them one by one in dispatch order
    # yields the same archive state as a concurrent run.
    outcomes = []
    for i in range(n):
        fault = cluster.failure_plan.get(i, "none")
        code, completed = _execute(Path(bundle.instance_scripts[i]), _instance_env(cluster, fault))
        steps = [(phase, "ok") for phase in completed]
        if code != 0:
            steps.append((_failed_phase(code, completed), "failed"))
        durations = [rng.randint(1, 3) for _ in steps]
        outcomes.append((code, steps, durations))

    events = []
    results = {}
    running: list = []
    t = 0
    next_index = 0
    while next_index < n or running:
        while next_index < n and len(running) < capacity:
            i = next_index
            code, steps, durations = outcomes[i]
            events.append((t, i, 0, f"start instance_{i}"))
            clock = t
            for k, ((phase, status), d) in enumerate(zip(steps, durations), start=1):
                clock += d
                events.append((clock, i, k, f"instance_{i} {phase} {status}"))
            end = clock if steps else t + 1
            state = "done" if code == 0 else "failed"
            phase_reached = steps[-1][0] if steps else PHASES[0]
            events.append((end, i, len(steps) + 1, f"end instance_{i} {state} exit={code}"))
            results[i] = InstanceResult(i, state, code, phase_reached, t, end)
            heapq.heappush(running, (end, i))
            next_index += 1
        t, _ = heapq.heappop(running)
        while running and running[0][0] <= t:
            heapq.heappop(running)

    events.sort()
    return SimReport(
        instances=tuple(results[i] for i in range(n)),
        wall_order=tuple((time, text) for time, _, _, text in events),
    )


def assert_archive_consistency(
    dataset_root: str | os.PathLike,
    *,
    scratch_root: str | os.PathLike | None = None,
    allowed_partials=(),
) -> list[str]:
    """Return a list of violations; an empty list means the archive is consistent.

    ``allowed_partials`` holds ``(pipeline, subject, session)`` keys whose
    provenance-less outputs are known and accepted.
    """
    violations = []
    allowed = set(allowed_partials)
    for pipeline, subject, session, run_dir in derivative_run_dirs(dataset_root):
        rel = run_dir.relative_to(dataset_root).as_posix()
        for tmp in sorted(run_dir.glob(".provenance.*.tmp")):
            violations.append(f"{rel}: leftover temporary provenance file {tmp.name}")
        state = is_complete(run_dir)
        if (run_dir / PROVENANCE_NAME).exists():
            if state is not CompletionState.COMPLETE:
                violations.append(f"{rel}: provenance does not verify against outputs")
        elif state is CompletionState.PARTIAL and (pipeline, subject, session) not in allowed:
            violations.append(f"{rel}: outputs present without provenance")
    if scratch_root is not None and Path(scratch_root).is_dir():
        for entry in sorted(Path(scratch_root).iterdir()):
            violations.append(f"orphan scratch directory {entry}")
    return violations
