#!/usr/bin/env python3
"""Regenerate src/attestbox/guests/*.wasm from their .wat sources.

Lines of the form ``;;@include NAME`` are replaced by the contents of NAME
(relative to the source file) before assembling.
"""

import argparse
import pathlib
import sys

import wasmtime

GUEST_DIR = pathlib.Path(__file__).resolve().parent.parent / "src" / "attestbox" / "guests"
LIBRARIES = {"lib.wat"}


def expand(path: pathlib.Path) -> str:
    out = []
    for line in path.read_text().splitlines():
        stripped = line.strip()
        if stripped.startswith(";;@include "):
            out.append((path.parent / stripped.split(None, 1)[1]).read_text())
        else:
            out.append(line)
    return "\n".join(out) + "\n"


def build(src: pathlib.Path) -> bytes:
    return wasmtime.wat2wasm(expand(src))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dir", type=pathlib.Path, default=GUEST_DIR)
    ap.add_argument("--check", action="store_true", help="fail if any .wasm is stale")
    args = ap.parse_args(argv)
    stale = []
    for src in sorted(args.dir.glob("*.wat")):
        if src.name in LIBRARIES:
            continue
        wasm = build(src)
        dst = src.with_suffix(".wasm")
        if dst.exists() and dst.read_bytes() == wasm:
            continue
        if args.check:
            stale.append(dst.name)
            continue
        dst.write_bytes(wasm)
        print(f"built {dst.name} ({len(wasm)} bytes)")
    if stale:
        print("stale: " + ", ".join(stale), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
