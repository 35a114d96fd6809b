"""Stand-in for ``singularity exec``: fabricates deterministic outputs.

Invoked by generated instance scripts as ``<stub> IMAGE COMMAND...`` with
``INPUTS_DIR`` and ``OUTPUTS_DIR`` exported.  ``--exit CODE`` makes the
"container" die before writing anything.
"""

import argparse
import os
import sys
from pathlib import Path

from bidsbatch.integrity import digest_file, iter_files


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bidsbatch-stub-container")
    parser.add_argument("--exit", type=int, default=0, dest="exit_code")
    parser.add_argument("image")
    parser.add_argument("command", nargs=argparse.REMAINDER)
    args = parser.parse_args(argv)
    if args.exit_code:
        print(f"stub container killed with code {args.exit_code}", file=sys.stderr)
        return args.exit_code

    inputs = Path(os.environ["INPUTS_DIR"])
    outputs = Path(os.environ["OUTPUTS_DIR"])
    rows = []
    for f in iter_files(inputs):
        rows.append(f"{f.relative_to(inputs).as_posix()}\t{digest_file(f)}\t{f.stat().st_size}")
    if not rows:
        print("stub container: no inputs staged", file=sys.stderr)
        return 1
    (outputs / "stats").mkdir(parents=True, exist_ok=True)
    (outputs / "summary.tsv").write_text("path\tsha256\tbytes\n" + "\n".join(rows) + "\n")
    (outputs / "stats" / "run.txt").write_text(f"image={Path(args.image).name}\nn_inputs={len(rows)}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
