"""Two-view unsupervised training with linear-probe checkpoints."""

import argparse

from pib.data import benchmark_dataset
from pib.engine import MemristorLayer, NetworkSpec, TrainConfig
from pib.info import KernelSpec
from pib.variants import AugmentSpec, linear_probe, probe_network, train_unsupervised


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--checkpoints", type=int, nargs="+", default=[100, 400, 1600])
    args = ap.parse_args()

    data = benchmark_dataset("mnist", 8000, 2000, args.seed)
    spec = NetworkSpec([MemristorLayer(784, args.width)], (args.width, 10))
    print(f"raw pixels: probe accuracy {linear_probe(data.X_test, data.y_test, args.seed):.4f}")
    for iters in args.checkpoints:
        cfg = TrainConfig(beta=0.0, iterations_per_unit=iters, kernel=KernelSpec(standardize=False), seed=args.seed)
        net = train_unsupervised(spec, data.X_train, cfg, AugmentSpec(2, 0.1, 0.2))
        print(f"{iters} iterations: probe accuracy {probe_network(net, data.X_test, data.y_test, args.seed):.4f}")


if __name__ == "__main__":
    main()
