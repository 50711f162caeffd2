#!/usr/bin/env python3
"""Download MNIST or Fashion-MNIST IDX files and check their MD5 sums.

    python3 scripts/fetch_data.py --dataset mnist --out data

Files keep their official ``.gz`` names; the loader reads them as is.
"""

import argparse
import hashlib
import sys
import urllib.request
from pathlib import Path

MIRRORS = {
    "mnist": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "http://yann.lecun.com/exdb/mnist/",
    ],
    "fashion": ["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
}

MD5 = {
    "mnist": {
        "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
        "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
        "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
        "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
    },
    "fashion": {
        "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
        "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
        "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
        "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
    },
}


def md5sum(path: Path) -> str:
    h = hashlib.md5()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fetch(dataset: str, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name, digest in MD5[dataset].items():
        target = out / name
        if target.exists() and md5sum(target) == digest:
            print(f"ok      {target}")
            continue
        for mirror in MIRRORS[dataset]:
            try:
                tmp = target.with_suffix(".part")
                urllib.request.urlretrieve(mirror + name, tmp)
            except OSError as exc:
                print(f"warning {mirror + name}: {exc}", file=sys.stderr)
                continue
            if md5sum(tmp) != digest:
                print(f"warning {mirror + name}: checksum mismatch", file=sys.stderr)
                tmp.unlink()
                continue
            tmp.replace(target)
            print(f"fetched {target}")
            break
        else:
            print(f"error   could not fetch {name}", file=sys.stderr)
            failures += 1
    return 1 if failures else 0


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dataset", choices=sorted(MD5), default="mnist")
    p.add_argument("--out", type=Path, default=Path("data"))
    args = p.parse_args()
    return fetch(args.dataset, args.out)


if __name__ == "__main__":
    sys.exit(main())
