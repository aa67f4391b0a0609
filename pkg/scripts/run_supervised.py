"""Memristor cascade on the MNIST subset: accuracy, BP reality gap and ADC fault recovery."""

import argparse
import json

from pib.baselines import BaselineConfig, bp_train_in_silico, deploy_and_measure_gap
from pib.data import benchmark_dataset
from pib.engine import (MemristorLayer, NetworkSpec, TrainConfig, cascade_train, evaluate, inject_adc_fault,
                        retrain_downstream)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hidden", type=int, default=100)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--fault-fraction", type=float, default=0.25)
    args = ap.parse_args()

    data = benchmark_dataset("mnist", 8000, 2000, args.seed)
    spec = NetworkSpec([MemristorLayer(784, args.hidden)], (args.hidden, 10))
    cfg = TrainConfig(iterations_per_unit=args.iterations, seed=args.seed)
    net = cascade_train(spec, data.X_train, data.y_train, cfg, log=print)
    deployed = evaluate(net, data.X_test, data.y_test)
    ideal = evaluate(net, data.X_test, data.y_test, ideal=True)

    bc = BaselineConfig(seed=args.seed)
    weights, sim = bp_train_in_silico(spec, data.X_train, data.y_train, bc, data.X_test, data.y_test)
    bp_deployed, bp_gap = deploy_and_measure_gap(weights, spec, data.X_test, data.y_test, sim, args.seed)

    inject_adc_fault(net, 0, args.fault_fraction, "random", args.seed)
    faulted = evaluate(net, data.X_test, data.y_test)
    retrain_downstream(net, data.X_train, data.y_train, 0, cfg)
    recovered = evaluate(net, data.X_test, data.y_test)

    print(json.dumps({
        "pib": {"deployed": deployed, "twin": ideal, "gap": ideal - deployed},
        "bp": {"in_silico": sim, "deployed": bp_deployed, "gap": bp_gap},
        "fault": {"before": deployed, "faulted": faulted, "recovered": recovered},
    }, indent=2))


if __name__ == "__main__":
    main()
