"""Train desk-scale models and write gradient-norm-versus-t curves to CSV.

One row per (mode, epoch, t, group) with the mean L2 norm of the loss
gradient with respect to the network output.
"""
import argparse
import csv

import numpy as np
import torch

from groupdiff.netcore import NetConfig
from groupdiff.synthmotion import SynthConfig, default_skeleton, generate_dataset, make_layout
from groupdiff.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="grad_probe.csv")
    p.add_argument("--modes", default="Baseline,GradBalanced,Final")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--probe-epochs", default="1,5,30")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)
    layout = make_layout(default_skeleton())
    data = generate_dataset(SynthConfig(), 0)["train"]
    t_grid = np.exp(np.linspace(np.log(0.01), np.log(20.0), 24)).tolist()
    rows = []
    for mode in args.modes.split(","):
        cfg = TrainConfig(mode=mode, epochs=args.epochs, warmup_epochs=1, seed=args.seed, net=NetConfig(channels=64),
                          probe_epochs=[int(e) for e in args.probe_epochs.split(",")], probe_t=t_grid)
        res = train(cfg, data, layout)
        rows += [{"mode": mode, **r} for r in res.probes]
        print(mode, "done")
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
