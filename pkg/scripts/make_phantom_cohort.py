#!/usr/bin/env python3
"""Write a cohort of synthetic tumour phantoms plus a manifest.

Layout under OUT::

    images/<case>_{t1,t1ce,t2,flair}.nii.gz
    gt/<case>.nii.gz          (BraTS disk coding 0/1/2/4)
    manifest.ini

Example::

    python3 scripts/make_phantom_cohort.py /tmp/cohort --cases 3
    segtool predict --manifest /tmp/cohort/manifest.ini --output-dir /tmp/pred \
        --predictor oracle:noise=2 --predictor oracle:noise=2 --predictor oracle:noise=2
    segtool evaluate --pred-dir /tmp/pred --gt-dir /tmp/cohort/gt
"""

import argparse
from pathlib import Path

from segtool.formats import write_manifest
from segtool.phantom import make_phantom, write_phantom_case
from segtool.rng import split_seed


def main():
    ap = argparse.ArgumentParser(description="write synthetic phantom cases and a manifest")
    ap.add_argument("out", type=Path)
    ap.add_argument("--cases", type=int, default=2)
    ap.add_argument("--dims", default="240,240,155", help="X,Y,Z (default: BraTS size)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lobes", type=int, default=3)
    args = ap.parse_args()
    dims = tuple(int(d) for d in args.dims.split(","))
    cases = []
    for i in range(args.cases):
        case_id = f"phantom_{i:03d}"
        image, labels = make_phantom(dims, seed=split_seed(args.seed, i), lobes=args.lobes)
        cases.append(write_phantom_case(args.out, case_id, image, labels, suffix=".nii.gz"))
        print(f"wrote {case_id}")
    write_manifest(cases, args.out / "manifest.ini")
    print(f"manifest: {args.out / 'manifest.ini'}")


if __name__ == "__main__":
    main()
