"""Batch-size x learning-rate grid search for the dense encoder on the phantom cohort.

Prints the validation-loss table per model and sub-protocol and the selected cell.
Run: python scripts/grid_search.py [--models verdict dki] [--sps SP1 SP2 SP3] [--epochs 60]
"""

import argparse
from dataclasses import replace

import numpy as np

from microfit import experiment, phantom
from microfit.neurofit import network, training
from microfit.protocol import subprotocol


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--models", nargs="+", default=["verdict", "dki"])
    p.add_argument("--sps", nargs="+", default=["SP1", "SP2", "SP3"])
    p.add_argument("--arch", default=network.DENSE, choices=(network.BASELINE, network.DENSE))
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    spec = phantom.PhantomSpec()
    for sp in args.sps:
        data = experiment.prepare_cohort(spec, sp, noise_seed=args.seed)
        train, val = data.table(data.split.train), data.table(data.split.validation)
        for model in args.models:
            grid = training.GridSpec.for_model(model)
            base = replace(training.TrainConfig.preset(args.arch, model, sp, seed=args.seed), epochs=args.epochs)
            res = training.grid_search(grid, network.MlpSpec.preset(args.arch, model), base, train, val,
                                       subprotocol(sp))
            print(f"\n{sp} {model} {args.arch}: best batch {res.best_batch_size}, lr {res.best_lr:g}")
            print("batch \\ lr " + " ".join(f"{lr:>10g}" for lr in grid.lrs))
            for bs, row in zip(grid.batch_sizes, res.val_loss):
                print(f"{bs:>10} " + " ".join(f"{v:10.3e}" if np.isfinite(v) else f"{'diverged':>10}" for v in row))


if __name__ == "__main__":
    main()
