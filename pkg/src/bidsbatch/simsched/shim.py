"""Fault-injecting wrapper around ``python -m bidsbatch.integrity``.

``--corrupt stage-in`` (or ``stage-out``) flips one byte of every
destination file after it is written, which the verified transfer must
catch.  Other subcommands pass straight through.
"""

import argparse
import functools
import sys
from pathlib import Path

from bidsbatch import integrity


def flip_first_byte(path: Path) -> None:
    with open(path, "r+b") as fh:
        b = fh.read(1)
        fh.seek(0)
        fh.write(bytes([(b[0] if b else 0) ^ 0xFF]))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bidsbatch-stage-shim")
    parser.add_argument("--corrupt", choices=("stage-in", "stage-out"), required=True)
    args, rest = parser.parse_known_args(argv)
    transfer = integrity.transfer_verified
    if rest and rest[0] == args.corrupt:
        transfer = functools.partial(integrity.transfer_verified, after_write=flip_first_byte)
    return integrity.main(rest, transfer=transfer)


if __name__ == "__main__":
    sys.exit(main())
