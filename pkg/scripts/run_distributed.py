"""Loopback decentralized training: one worker thread per unit, checked against the in-process oracle."""

import argparse
import threading

import numpy as np

from pib.data import benchmark_dataset
from pib.distributed import DistributedConfig, Worker, coordinator_run, sequential_oracle
from pib.engine import MemristorLayer, NetworkSpec, OpticalLayer, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--hybrid", action="store_true", help="use an optical second unit")
    args = ap.parse_args()

    data = benchmark_dataset("mnist", 8000, 2000, args.seed)
    second = OpticalLayer(64, 256, 32) if args.hybrid else MemristorLayer(64, 32)
    spec = NetworkSpec([MemristorLayer(784, 64), second], (32, 10))
    cfg = TrainConfig(iterations_per_unit=args.iterations, seed=args.seed)
    workers = [Worker("127.0.0.1:0") for _ in spec.layers]
    threads = [threading.Thread(target=w.serve, daemon=True) for w in workers]
    for t in threads:
        t.start()
    run = coordinator_run(spec, data, [w.endpoint for w in workers], DistributedConfig(cfg), log=print)
    for t in threads:
        t.join()
    oracle = sequential_oracle(spec, data.X_train, data.y_train, cfg)
    same = all(np.array_equal(r.params[k], ref[k]) for r, ref in zip(run.results, oracle) for k in ref)
    print(f"test accuracy {run.test_accuracy:.4f}; parameters bitwise equal to the oracle: {same}")
    for conn in run.log.connections():
        print(f"{conn}: {run.log.frames_during_training(conn)} coordinator frames while training")


if __name__ == "__main__":
    main()
