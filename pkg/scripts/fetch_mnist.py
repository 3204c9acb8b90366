#!/usr/bin/env python3
"""Download the four MNIST IDX files into ``data/mnist``.

The files are taken from the ``MNIST_dir`` 0.2.0 wheel on PyPI, which ships
the original uncompressed IDX files; every extracted file is checked against
a pinned SHA-256 digest.

    python3 scripts/fetch_mnist.py [--dest data/mnist] [--wheel path/to/local.whl]
"""
from __future__ import annotations

import argparse
import hashlib
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

WHEEL_URL = ("https://files.pythonhosted.org/packages/5c/42/504919bf729ad48c424afee77c993f727add4b333b3941125ad657a5c445/"
             "MNIST_dir-0.2.0-py3-none-any.whl")
WHEEL_SHA256 = "b19bde2f3f4b6dd537af9c6827b039c97d303a4bced8f257cf679f6c4e196441"
FILES = {
    "train-images.idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels.idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images.idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels.idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dest", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "mnist")
    p.add_argument("--wheel", type=Path, help="use an already downloaded wheel")
    args = p.parse_args(argv)

    if all((args.dest / name).exists() and sha256((args.dest / name).read_bytes()) == digest
           for name, digest in FILES.items()):
        print(f"{args.dest}: already complete")
        return 0
    if args.wheel:
        blob = args.wheel.read_bytes()
    else:
        print(f"downloading {WHEEL_URL}")
        with urllib.request.urlopen(WHEEL_URL, timeout=120) as resp:
            blob = resp.read()
    if sha256(blob) != WHEEL_SHA256:
        print("error: wheel checksum mismatch", file=sys.stderr)
        return 1
    args.dest.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        members = {Path(n).name: n for n in zf.namelist() if Path(n).name in FILES}
        for name, digest in FILES.items():
            if name not in members:
                print(f"error: {name} missing from wheel", file=sys.stderr)
                return 1
            data = zf.read(members[name])
            if sha256(data) != digest:
                print(f"error: {name} checksum mismatch", file=sys.stderr)
                return 1
            (args.dest / name).write_bytes(data)
            print(f"wrote {args.dest / name} ({len(data)} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
