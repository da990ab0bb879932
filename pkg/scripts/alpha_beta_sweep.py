"""3x3 sweep of the BMFI weights (alpha, beta) for the full GKD+BMFI student.

Trains (or loads) the teacher once, then runs one student per grid point
and seed and prints the mean final val mAP@0.5 as a table.

    python3 scripts/alpha_beta_sweep.py --teacher teacher.ckpt --seeds 0 1
"""

import argparse
import itertools
import logging
from dataclasses import replace

import numpy as np

from gradkd.data import in_memory_dataset
from gradkd.distill import distill_train, teacher_signals, train_teacher
from gradkd.experiment import VARIANTS, Protocol
from gradkd.io import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--teacher", help="teacher checkpoint; trained from scratch when omitted")
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    ap.add_argument("--betas", type=float, nargs="+", default=[3e-4, 1e-3, 3e-3])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None, help="override the protocol's student epochs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    proto = Protocol()
    if args.epochs is not None:
        proto = replace(proto, student_train=replace(proto.student_train, epochs=args.epochs))
    ds = in_memory_dataset(proto.data_seed, proto.n_train, proto.n_val)
    if args.teacher:
        teacher = load_checkpoint(args.teacher).model
    else:
        teacher = train_teacher(proto.teacher_config, proto.teacher_train, ds).model
    sig = teacher_signals(teacher, ds.train.images, ds.train.gts)
    val_sig = teacher_signals(teacher, ds.val.images, ds.val.gts)

    table = np.zeros((len(args.alphas), len(args.betas)))
    for (i, a), (j, b) in itertools.product(enumerate(args.alphas), enumerate(args.betas)):
        kd = replace(proto.kd, alpha=a, beta=b, **VARIANTS["gkd_bmfi"])
        finals = []
        for seed in args.seeds:
            tc = replace(proto.student_train, seed=seed)
            res = distill_train(teacher, proto.student_config, kd, tc, ds, sig, val_sig)
            finals.append(res.history[-1]["val_map50"])
        table[i, j] = np.mean(finals)
        logging.info("alpha %g beta %g: mAP %.4f", a, b, table[i, j])

    print("alpha \\ beta " + " ".join(f"{b:>8g}" for b in args.betas))
    for a, row in zip(args.alphas, table):
        print(f"{a:>12g} " + " ".join(f"{100 * v:8.2f}" for v in row))


if __name__ == "__main__":
    main()
