#!/usr/bin/env python3
"""Minimal external predictor speaking the segtool wire protocol.

Reads one JSON request per line on stdin, answers with one JSON line on
stdout. By default the logits are the patch itself (a "cat" predictor,
so the class count equals the channel count). With ``--logits FILE`` it
ignores the patch and echoes the raw tensor stored in FILE.

Run it through segtool with::

    segtool predict ... --predictor "cmd:python3 scripts/cat_predictor.py"

Only the standard library is used so the script doubles as a template
for wrapping a real network in another environment.
"""

import argparse
import json
import shutil
import struct
import sys

MAGIC = b"VOLT0001"


def check_raw(path):
    with open(path, "rb") as fh:
        head = fh.read(36)
    magic, c, nx, ny, nz = struct.unpack_from("<8s4I", head)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a raw tensor")
    return c, (nx, ny, nz)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--logits", help="raw tensor file to return for every request")
    args = ap.parse_args()
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        out = f"logits_{req['id']}.volt"
        src = args.logits or req["patch"]
        channels, _ = check_raw(src)
        shutil.copyfile(src, out)
        sys.stdout.write(json.dumps({"id": req["id"], "logits": out, "channels": channels}) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
