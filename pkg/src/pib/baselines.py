"""Comparison trainers: in-silico backprop, physics-aware training and DFA.

All three share one stack model. Per-unit trainable parameters match the
PIB engine (crossbar weights ``W`` for memristor units, the digital readout
``W``/``b`` for optical units) and the network ends in the same softmax
readout on standardized features. The stack differs only in how the
forward pass is produced and how errors reach the units:

* ``bp``   noiseless digital twins forward, exact gradients backward;
* ``pat``  measured physical forward, twin Jacobians at the measured activations;
* ``dfa``  measured physical forward, fixed random projections of the output error.

Gradients never cross a scattering layer, which has no twin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import (
    NetworkSpec,
    TrainedNetwork,
    build_stages,
    evaluate,
    feature_stats,
    standardize,
    to_domain,
)
from .errors import NonFiniteLoss, ShapeMismatch
from .optim import Adam, AdamConfig, cross_entropy
from .units import DigitalReadout


@dataclass
class BaselineConfig:
    epochs: int = 20
    batch_size: int = 100
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeedbackMatrices:
    """Fixed random maps from the output error to each hidden unit's outputs."""

    matrices: list
    seed: int

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int) -> "FeedbackMatrices":
        rng = np.random.default_rng([seed, 40])
        k = spec.n_classes
        mats = [rng.normal(0.0, 1.0 / np.sqrt(k), size=(layer.d_out, k)) for layer in spec.layers]
        for m in mats:
            m.flags.writeable = False
        return cls(mats, seed)

    def checksum(self) -> float:
        return float(sum(np.sum(m * np.arange(1, m.size + 1).reshape(m.shape)) for m in self.matrices))


@dataclass
class NetworkWeights:
    """Everything a trainer learned, independent of any physical instance."""

    unit_params: list
    in_stats: list
    speckle_stats: list
    readout: DigitalReadout
    readout_stats: tuple


class StackModel:
    def __init__(self, spec: NetworkSpec, seed: int):
        self.spec = spec
        self.net = TrainedNetwork(spec, build_stages(spec, seed))
        self.params = [s.init_params(np.random.default_rng([seed, l, 2])) for l, s in enumerate(self.net.stages)]
        k, d = spec.final_readout[1], spec.final_readout[0]
        self.readout = DigitalReadout(np.zeros((k, d)), np.zeros(k))
        self.readout_stats = None

    # the memristor path goes through a deployed crossbar only in physical mode
    def _stage_forward(self, stage, p, x_in, physical: bool):
        if stage.kind == "memristor":
            if physical:
                pre = stage.unit.mvm_forward(x_in)
            else:
                pre = x_in @ p["W"]
            return {"x_in": x_in, "pre": pre, "h": np.maximum(pre, 0.0)}
        H = stage.local_inputs(x_in)
        r = DigitalReadout(p["W"], p["b"], stage.layer.activation)
        pre = r.pre(H)
        return {"x_in": x_in, "H": H, "pre": pre, "h": r.forward(H)}

    def deploy(self) -> None:
        for stage, p in zip(self.net.stages, self.params):
            if stage.kind == "memristor":
                stage.unit.deploy_weights(p["W"])

    def forward(self, X: np.ndarray, physical: bool) -> tuple[list, np.ndarray, np.ndarray]:
        h = X
        caches = []
        for l, (stage, p) in enumerate(zip(self.net.stages, self.params)):
            x_in = h if stage.in_stats is None else to_domain(standardize(h, stage.in_stats), stage.kind)
            c = self._stage_forward(stage, p, x_in, physical)
            caches.append(c)
            h = c["h"]
        z = standardize(h, self.readout_stats)
        return caches, z, self.readout.forward(z)

    def refresh_stats(self, X: np.ndarray, physical: bool) -> None:
        """Re-fit adapter and readout statistics on the full training set."""
        if physical:
            self.deploy()
        h = X
        for l, (stage, p) in enumerate(zip(self.net.stages, self.params)):
            stage.in_stats = None if l == 0 else feature_stats(h)
            x_in = h if stage.in_stats is None else to_domain(standardize(h, stage.in_stats), stage.kind)
            if stage.kind == "optical":
                stage.local_inputs(x_in, fit=True)
            h = self._stage_forward(stage, p, x_in, physical)["h"]
        self.readout_stats = feature_stats(h)

    def weights(self) -> NetworkWeights:
        return NetworkWeights(
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            [s.in_stats for s in self.net.stages],
            [getattr(s, "speckle_stats", None) for s in self.net.stages],
            self.readout.copy(),
            self.readout_stats,
        )

    def accuracy(self, X, y, physical: bool) -> float:
        if physical:
            self.deploy()
        return float(np.mean(np.argmax(self.forward(X, physical)[2], axis=1) == y))


def _hidden_grads(model: StackModel, caches, dh: np.ndarray, mode: str, fb: FeedbackMatrices | None,
                  e: np.ndarray) -> list:
    grads = [None] * len(caches)
    stages = model.net.stages
    for l in range(len(caches) - 1, -1, -1):
        stage, c, p = stages[l], caches[l], model.params[l]
        if mode == "dfa":
            dh = e @ fb.matrices[l].T
        if dh is None:
            continue
        if stage.kind == "memristor":
            dpre = dh * (c["pre"] > 0)
            grads[l] = {"W": c["x_in"].T @ dpre}
            if l > 0 and mode != "dfa":
                u = standardize(caches[l - 1]["h"], stage.in_stats) / 3.0
                dh = (dpre @ p["W"].T) * (np.abs(u) < 1.0) / (3.0 * stage.in_stats[1])
            else:
                dh = None
        else:
            dpre = dh * (c["pre"] > 0) if stage.layer.activation == "relu" else dh
            grads[l] = {"W": dpre.T @ c["H"], "b": dpre.sum(axis=0)}
            dh = None  # no twin for the scattering layer
    return grads


def _train(spec: NetworkSpec, X, y, cfg: BaselineConfig, mode: str, fb: FeedbackMatrices | None = None,
           log=None) -> StackModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != spec.d_in or len(y) != len(X):
        raise ShapeMismatch("training set does not match the network")
    physical = mode in ("pat", "dfa")
    model = StackModel(spec, cfg.seed)
    opts = [Adam(p, cfg.optimizer) for p in model.params]
    ro = Adam({"W": model.readout.W, "b": model.readout.b}, cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 41])
    n = len(y)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        model.refresh_stats(X, physical)
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            if physical:
                model.deploy()
            caches, z, logits = model.forward(X[idx], physical)
            loss, dlogits = cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"{mode}: cross-entropy diverged in epoch {epoch}")
            dW, db, dz = model.readout.backward(z, dlogits)
            ro.step({"W": dW, "b": db})
            dh = dz / model.readout_stats[1] if mode != "dfa" else None
            for opt, g in zip(opts, _hidden_grads(model, caches, dh, mode, fb, dlogits)):
                if g is not None:
                    opt.step(g)
        if log:
            log(f"{mode} epoch {epoch}: loss {loss:.4f}")
    model.refresh_stats(X, physical)
    return model


def assemble(spec: NetworkSpec, weights: NetworkWeights, seed: int) -> TrainedNetwork:
    """Deploy learned weights onto freshly seeded physical units."""
    if len(weights.unit_params) != len(spec.layers):
        raise ShapeMismatch("weights do not match the network's unit count")
    net = TrainedNetwork(spec, build_stages(spec, seed))
    for stage, p, st, sp in zip(net.stages, weights.unit_params, weights.in_stats, weights.speckle_stats):
        stage.in_stats = st
        if stage.kind == "optical":
            stage.speckle_stats = sp
        stage.set_params(p)
    net.readout_stats = weights.readout_stats
    net.final_readout = weights.readout.copy()
    return net


def bp_train_in_silico(spec: NetworkSpec, X, y, cfg: BaselineConfig, X_test=None, y_test=None,
                       log=None) -> tuple[NetworkWeights, float | None]:
    """End-to-end backprop through noiseless twins; returns weights and twin test accuracy."""
    model = _train(spec, X, y, cfg, "bp", log=log)
    sim = None if X_test is None else model.accuracy(np.asarray(X_test, dtype=np.float64), np.asarray(y_test), False)
    return model.weights(), sim


def deploy_and_measure_gap(weights: NetworkWeights, spec: NetworkSpec, X_test, y_test, sim_accuracy: float,
                           seed: int = 0) -> tuple[float, float]:
    net = assemble(spec, weights, seed)
    deployed = evaluate(net, X_test, y_test)
    return deployed, float(sim_accuracy - deployed)


def pat_train(spec: NetworkSpec, X, y, cfg: BaselineConfig, log=None) -> TrainedNetwork:
    model = _train(spec, X, y, cfg, "pat", log=log)
    return assemble(spec, model.weights(), cfg.seed)


def dfa_train(spec: NetworkSpec, X, y, cfg: BaselineConfig, fb: FeedbackMatrices | None = None,
              log=None) -> TrainedNetwork:
    fb = fb or FeedbackMatrices.create(spec, cfg.seed)
    if len(fb.matrices) != len(spec.layers):
        raise ShapeMismatch("one feedback matrix per hidden unit is required")
    model = _train(spec, X, y, cfg, "dfa", fb, log=log)
    return assemble(spec, model.weights(), cfg.seed)


# -- report ---------------------------------------------------------------------

REPORT_KEYS = ("method", "dataset", "seed", "sim_accuracy", "deployed_accuracy", "noise_curve",
               "low_data_curve", "ood_auroc")


def benchmark_report(method: str, dataset: str, seed: int, sim_accuracy=None, deployed_accuracy=None,
                     noise_curve=None, low_data_curve=None, ood_auroc=None) -> dict:
    return {"method": method, "dataset": dataset, "seed": int(seed),
            "sim_accuracy": sim_accuracy, "deployed_accuracy": deployed_accuracy,
            "noise_curve": noise_curve, "low_data_curve": low_data_curve, "ood_auroc": ood_auroc}


def report_json(reports: list) -> str:
    return json.dumps(reports, indent=2, sort_keys=True) + "\n"
