"""Finite-difference gradient agreement for every layer kind and architecture.

    python scripts/gradient_report.py --seeds 10 --resolution 16
"""

import argparse
import sys

from mvq import evaluation, nn, qnet
from mvq.nn import LayerSpec
from mvq.qnet import Arch, ArchConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--resolution", type=int, default=16)
    args = p.parse_args()
    rows = []
    for kind in LayerSpec.KINDS:
        errs = [max(nn.layer_gradient_check(kind, s).values()) for s in range(args.seeds)]
        rows.append({"component": kind, "worst_relative_error": max(errs)})
    cfg = ArchConfig(resolution=args.resolution)
    for arch in Arch:
        errs = [max(qnet.gradient_check(arch, s, cfg).values()) for s in range(args.seeds)]
        rows.append({"component": arch.value, "worst_relative_error": max(errs)})
    sys.stdout.write(evaluation.to_csv(rows))


if __name__ == "__main__":
    main()
