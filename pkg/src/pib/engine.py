"""Layer-wise PIB training of cascaded physical units.

Each unit is optimized on its own: a digital twin (memristor) or the
measured speckle features (optical) give the unit's output ``Z`` for a
mini-batch, and the PIB loss against the global input ``X`` and target ``Y``
drives an Adam step on that unit's parameters only. The trained unit is then
deployed and measured, and its noisy outputs become the next unit's inputs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import info
from .errors import EmptyHoldout, IndexOutOfRange, NonFiniteLoss, ShapeMismatch
from .info import KernelSpec
from .optim import Adam, AdamConfig, cross_entropy, softmax
from .units import DigitalReadout, FaultSpec, MemristorConfig, MemristorUnit, OpticalUnit

# -- network description ------------------------------------------------------


@dataclass
class MemristorLayer:
    rows: int
    cols: int
    g_min: float = 2.0
    g_max: float = 40.0
    g_levels: int = 256
    read_noise_rel: float = 0.02
    adc_bits: int = 8
    adc_range: float = 4.0
    w_max: float = 1.0

    kind = "memristor"

    @property
    def d_in(self) -> int:
        return self.rows

    @property
    def d_out(self) -> int:
        return self.cols

    def device_config(self, seed: int) -> MemristorConfig:
        d = asdict(self)
        return MemristorConfig(seed=seed, **d)


@dataclass
class OpticalLayer:
    n_in: int
    n_out: int
    readout_dim: int
    encoding: str | None = "eight_bit"
    threshold: float = 0.5
    shot_noise_rel: float = 0.01
    activation: str = "identity"

    kind = "optical"

    @property
    def d_in(self) -> int:
        return self.n_in

    @property
    def d_out(self) -> int:
        return self.readout_dim


LAYER_TYPES = {"memristor": MemristorLayer, "optical": OpticalLayer}


@dataclass
class NetworkSpec:
    layers: list
    final_readout: tuple

    def __post_init__(self):
        self.final_readout = tuple(int(v) for v in self.final_readout)
        dims = [(l.d_in, l.d_out) for l in self.layers]
        for (_, out), (nxt, _) in zip(dims, dims[1:]):
            if out != nxt:
                raise ShapeMismatch(f"layer output {out} does not feed layer input {nxt}")
        if dims and dims[-1][1] != self.final_readout[0]:
            raise ShapeMismatch("last hidden layer does not match the final readout input")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in if self.layers else self.final_readout[0]

    @property
    def n_classes(self) -> int:
        return self.final_readout[1]

    def to_dict(self) -> dict:
        return {"layers": [dict(type=l.kind, **asdict(l)) for l in self.layers],
                "final_readout": list(self.final_readout)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(LAYER_TYPES[entry.pop("type")](**entry))
        return cls(layers, tuple(d["final_readout"]))


@dataclass
class TrainConfig:
    beta: float = 0.1
    alpha: float = info.DEFAULT_ALPHA
    batch_size: int = 100
    iterations_per_unit: int = 500
    optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-4))
    seed: int = 0
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(standardize=True))
    readout_epochs: int = 30
    readout_lr: float = 1e-2
    readout_batch: int = 100
    monitor_size: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        info.check_alpha(self.alpha)
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec.from_dict(self.kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- information-plane trace --------------------------------------------------

TRACE_HEADER = ("unit", "iteration", "i_xz_bits", "i_yz_bits", "loss")


@dataclass
class InfoPlaneTrace:
    records: list = field(default_factory=list)

    def append(self, unit: int, iteration: int, i_xz: float, i_yz: float, loss: float) -> None:
        self.records.append((int(unit), int(iteration), float(i_xz), float(i_yz), float(loss)))

    def extend(self, other: "InfoPlaneTrace") -> None:
        self.records.extend(other.records)

    def for_unit(self, unit: int) -> np.ndarray:
        rows = [r[1:] for r in self.records if r[0] == unit]
        return np.array(rows, dtype=np.float64).reshape(-1, 4)

    def drop_units_from(self, unit: int) -> None:
        self.records = [r for r in self.records if r[0] < unit]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for u, it, ixz, iyz, loss in self.records:
            w.writerow([u, it, repr(ixz), repr(iyz), repr(loss)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "InfoPlaneTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {rows[0]}")
        return cls([(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]])


# -- stages: a physical unit plus its digital glue ----------------------------


def feature_stats(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = h.mean(axis=0)
    std = h.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def standardize(h: np.ndarray, stats) -> np.ndarray:
    return (h - stats[0]) / stats[1]


def to_domain(u: np.ndarray, kind: str) -> np.ndarray:
    """Map standardized features onto a consumer's physical input range."""
    if kind == "memristor":
        return np.clip(u / 3.0, -1.0, 1.0)
    if kind == "optical":
        return np.clip(0.5 + u / 6.0, 0.0, 1.0)
    return u


RANGE_QUANTILE = 0.99
RANGE_HEADROOM = 0.75


class MemristorStage:
    """Crossbar followed by a digital ReLU. Trainable: the logical weights ``W``."""

    kind = "memristor"

    def __init__(self, layer: MemristorLayer, seed: int):
        self.layer = layer
        self.unit = MemristorUnit(layer.device_config(seed))
        self.in_stats = None

    def init_params(self, rng: np.random.Generator) -> dict:
        return {"W": rng.standard_normal((self.layer.rows, self.layer.cols)) / np.sqrt(self.layer.rows)}

    def local_inputs(self, x_in: np.ndarray, fit: bool = False) -> np.ndarray:
        return x_in

    def twin(self, params: dict, h: np.ndarray):
        pre = h @ params["W"]
        return np.maximum(pre, 0.0), pre

    def twin_backward(self, params: dict, h: np.ndarray, pre, dz: np.ndarray) -> dict:
        return {"W": h.T @ (dz * (pre > 0))}

    def fit_range(self, params: dict, pre: np.ndarray, headroom: float = RANGE_HEADROOM) -> None:
        """Shrink ``W`` in place so the batch's upper pre-activations stay inside the ADC full scale.

        ReLU commutes with positive scaling and the kernels are scale-free, so
        this changes what the ADC sees but not the objective.
        """
        top = float(np.quantile(pre, RANGE_QUANTILE))
        limit = headroom * self.layer.adc_range
        if top > limit:
            params["W"] *= limit / top

    def set_params(self, params: dict) -> None:
        self.unit.deploy_weights(params["W"])

    def params(self) -> dict:
        return {"W": self.unit.W.copy()}

    def measure(self, x_in: np.ndarray) -> np.ndarray:
        return np.maximum(self.unit.mvm_forward(x_in), 0.0)

    def ideal(self, x_in: np.ndarray) -> np.ndarray:
        return np.maximum(x_in @ self.unit.W, 0.0)


class OpticalStage:
    """Speckle unit followed by a standardizer and a trainable digital readout."""

    kind = "optical"

    def __init__(self, layer: OpticalLayer, seed: int):
        self.layer = layer
        self.unit = OpticalUnit(layer.n_in, layer.n_out, layer.encoding, layer.threshold,
                                layer.shot_noise_rel, seed)
        self.in_stats = None
        self.speckle_stats = None
        self.readout = None

    def init_params(self, rng: np.random.Generator) -> dict:
        r = DigitalReadout.init(self.layer.n_out, self.layer.readout_dim, rng, self.layer.activation)
        return {"W": r.W, "b": r.b}

    def local_inputs(self, x_in: np.ndarray, fit: bool = False) -> np.ndarray:
        s = self.unit.optical_forward(x_in)
        if fit or self.speckle_stats is None:
            self.speckle_stats = feature_stats(s)
        return standardize(s, self.speckle_stats)

    def twin(self, params: dict, h: np.ndarray):
        r = DigitalReadout(params["W"], params["b"], self.layer.activation)
        return r.forward(h), r

    def twin_backward(self, params: dict, h: np.ndarray, r, dz: np.ndarray) -> dict:
        dW, db, _ = r.backward(h, dz)
        return {"W": dW, "b": db}

    def set_params(self, params: dict) -> None:
        self.readout = DigitalReadout(params["W"].copy(), params["b"].copy(), self.layer.activation)

    def params(self) -> dict:
        return {"W": self.readout.W.copy(), "b": self.readout.b.copy()}

    def measure(self, x_in: np.ndarray) -> np.ndarray:
        s = self.unit.optical_forward(x_in)
        return self.readout.forward(standardize(s, self.speckle_stats))

    ideal = measure


def make_stage(layer, seed: int):
    return MemristorStage(layer, seed) if layer.kind == "memristor" else OpticalStage(layer, seed)


def unit_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0]).generate_state(1)[0])


def adapt_input(stage, h: np.ndarray) -> np.ndarray:
    if stage.in_stats is None:
        return h
    return to_domain(standardize(h, stage.in_stats), stage.kind)


# -- local unit training ------------------------------------------------------


def target_gram(y: np.ndarray) -> np.ndarray:
    """Label kernel for class indices, median-bandwidth Gaussian for real targets."""
    y = np.asarray(y)
    if np.issubdtype(y.dtype, np.integer):
        return info.label_gram(y)
    return info.gram(y.reshape(len(y), -1), KernelSpec.median())


class BatchSampler:
    """Seeded epoch-wise shuffler yielding index arrays of a fixed size."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return idx


def train_unit_local(H: np.ndarray, X: np.ndarray, y: np.ndarray, stage, cfg: TrainConfig,
                     unit_index: int = 0, init: dict | None = None,
                     progress: Callable | None = None) -> tuple[dict, InfoPlaneTrace]:
    """PIB optimization of one unit on its local inputs ``H``.

    ``H`` is row-aligned with the global input ``X`` and target ``y``. Only
    ``stage.twin``/``stage.twin_backward`` are used; no other unit is touched.
    """
    n = H.shape[0]
    if X.shape[0] != n or len(y) != n:
        raise ShapeMismatch("local inputs, X and Y must be row-aligned")
    params = init if init is not None else stage.init_params(np.random.default_rng([cfg.seed, unit_index, 2]))
    trace = InfoPlaneTrace()
    if cfg.iterations_per_unit <= 0:
        return params, trace
    opt = Adam(params, cfg.optimizer)
    sampler = BatchSampler(n, cfg.batch_size, np.random.default_rng([cfg.seed, unit_index, 1]))
    x_kernel = KernelSpec.median()
    monitor = None
    if cfg.monitor_size > 0:
        m_idx = np.random.default_rng([cfg.seed, unit_index, 3]).choice(n, min(cfg.monitor_size, n), replace=False)
        monitor = (m_idx, info.gram(X[m_idx], x_kernel), target_gram(y[m_idx]))
    for it in range(cfg.iterations_per_unit):
        idx = sampler.next()
        Xg, Yg = info.gram(X[idx], x_kernel), target_gram(y[idx])
        Z, cache = stage.twin(params, H[idx])
        terms = info.pib_objective(Z, Xg, Yg, cfg.beta, cfg.alpha, cfg.kernel)
        if not (np.isfinite(terms.loss) and np.all(np.isfinite(terms.grad))):
            raise NonFiniteLoss(f"unit {unit_index} iteration {it}: loss={terms.loss}, "
                                f"I(Y;Z)={terms.i_yz}, I(X;Z)={terms.i_xz}, sigma={terms.sigma}")
        opt.step(stage.twin_backward(params, H[idx], cache, terms.grad))
        if monitor is None:
            i_xz, i_yz = terms.i_xz, terms.i_yz
        else:
            m_idx, mXg, mYg = monitor
            A = info.gram(stage.twin(params, H[m_idx])[0], cfg.kernel)
            i_xz = info.mutual_information(A, mXg, cfg.alpha)
            i_yz = info.mutual_information(A, mYg, cfg.alpha)
        trace.append(unit_index, it, i_xz, i_yz, terms.loss)
        if progress is not None:
            progress(it, terms.loss, i_xz, i_yz)
    return params, trace


# -- final readout ------------------------------------------------------------


def train_softmax(Z: np.ndarray, y: np.ndarray, n_classes: int, epochs: int, lr: float,
                  batch: int | None, rng: np.random.Generator) -> DigitalReadout:
    r = DigitalReadout(np.zeros((n_classes, Z.shape[1])), np.zeros(n_classes))
    opt = Adam({"W": r.W, "b": r.b}, AdamConfig(lr=lr))
    n = Z.shape[0]
    batch = n if batch is None else min(batch, n)
    for _ in range(epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            loss, dlogits = cross_entropy(r.forward(Z[idx]), y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss("readout cross-entropy diverged")
            dW, db, _ = r.backward(Z[idx], dlogits)
            opt.step({"W": dW, "b": db})
    return r


# -- trained network ----------------------------------------------------------


@dataclass
class TrainedNetwork:
    spec: NetworkSpec
    stages: list
    readout_stats: tuple | None = None
    final_readout: DigitalReadout | None = None
    trace: InfoPlaneTrace = field(default_factory=InfoPlaneTrace)

    @property
    def units(self) -> list:
        return [s.unit for s in self.stages]

    def raw_features(self, X: np.ndarray, upto: int | None = None, ideal: bool = False) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        for stage in self.stages[:upto]:
            x_in = adapt_input(stage, h)
            h = stage.ideal(x_in) if ideal else stage.measure(x_in)
        return h

    def features(self, X: np.ndarray, ideal: bool = False) -> np.ndarray:
        """Standardized penultimate features (the final readout's input)."""
        h = self.raw_features(X, ideal=ideal)
        return h if self.readout_stats is None else standardize(h, self.readout_stats)

    def logits(self, X: np.ndarray, ideal: bool = False) -> np.ndarray:
        return self.final_readout.forward(self.features(X, ideal))

    def predict(self, X: np.ndarray, ideal: bool = False) -> np.ndarray:
        return np.argmax(self.logits(X, ideal), axis=1)


def build_stages(spec: NetworkSpec, seed: int) -> list:
    return [make_stage(layer, unit_seed(seed, i)) for i, layer in enumerate(spec.layers)]


def _check_dataset(spec: NetworkSpec, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ShapeMismatch(f"dataset width {X.shape} does not match network input {spec.d_in}")
    y = np.asarray(y)
    if len(y) != X.shape[0]:
        raise ShapeMismatch("features and labels differ in length")
    return X, y


def fit_readout(net: TrainedNetwork, h: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> None:
    net.readout_stats = feature_stats(h)
    Z = standardize(h, net.readout_stats)
    net.final_readout = train_softmax(Z, y, net.spec.n_classes, cfg.readout_epochs, cfg.readout_lr,
                                      cfg.readout_batch, np.random.default_rng([cfg.seed, 10_000]))


def _cascade(net: TrainedNetwork, X, y, cfg: TrainConfig, start: int, log=None) -> TrainedNetwork:
    h = X
    for l, stage in enumerate(net.stages):
        if l < start:
            h = stage.measure(adapt_input(stage, h))
            continue
        stage.in_stats = None if l == 0 else feature_stats(h)
        x_in = adapt_input(stage, h)
        H = stage.local_inputs(x_in, fit=True)
        params, trace = train_unit_local(H, X, y, stage, cfg, unit_index=l)
        net.trace.extend(trace)
        stage.set_params(params)
        h = stage.measure(x_in)
        if log:
            log(f"unit {l}: trained {cfg.iterations_per_unit} iterations")
    fit_readout(net, h, y, cfg)
    return net


def cascade_train(spec: NetworkSpec, X, y, cfg: TrainConfig, log=None) -> TrainedNetwork:
    X, y = _check_dataset(spec, X, y)
    net = TrainedNetwork(spec, build_stages(spec, cfg.seed))
    return _cascade(net, X, y, cfg, 0, log)


def evaluate(net: TrainedNetwork, X, y, ideal: bool = False) -> float:
    X, y = _check_dataset(net.spec, X, y)
    return float(np.mean(net.predict(X, ideal) == y))


def retrain_downstream(net: TrainedNetwork, X, y, faulted_unit_index: int, cfg: TrainConfig) -> TrainedNetwork:
    """Re-run the cascade after ``faulted_unit_index`` on the corrupted measurements.

    Units up to and including the faulted one are left untouched.
    """
    if not 0 <= faulted_unit_index < len(net.stages):
        raise IndexOutOfRange(f"no unit {faulted_unit_index} in a {len(net.stages)}-unit network")
    X, y = _check_dataset(net.spec, X, y)
    net.trace.drop_units_from(faulted_unit_index + 1)
    return _cascade(net, X, y, cfg, faulted_unit_index + 1)


def inject_adc_fault(net: TrainedNetwork, unit_index: int, fraction: float, mode: str = "random",
                     seed: int = 0) -> FaultSpec:
    """Break the ADCs of a seeded random ``fraction`` of a crossbar's output columns."""
    if not 0 <= unit_index < len(net.stages):
        raise IndexOutOfRange(f"no unit {unit_index} in a {len(net.stages)}-unit network")
    stage = net.stages[unit_index]
    if stage.kind != "memristor":
        raise ShapeMismatch("ADC faults apply to memristor units")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    cols = stage.layer.cols
    picked = np.random.default_rng([seed, unit_index, 50]).choice(cols, int(round(fraction * cols)), replace=False)
    fault = FaultSpec.random_replace(sorted(picked)) if mode == "random" else FaultSpec.stuck(sorted(picked))
    stage.unit.inject_fault(fault)
    return fault


# -- generalization probes ----------------------------------------------------

NOISE_LEVELS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
DATA_FRACTIONS = (0.01, 0.05, 0.10, 0.50, 1.0)


def auroc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Probability that a positive outscores a negative (ties count half)."""
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (len(pos) * len(neg)))


def max_softmax(net: TrainedNetwork, X: np.ndarray) -> np.ndarray:
    return softmax(net.logits(X)).max(axis=1)


def noise_curve(net: TrainedNetwork, X, y, levels=NOISE_LEVELS, dynamic_range: float = 1.0, seed: int = 0) -> list:
    out = []
    for k, level in enumerate(levels):
        Xn = X
        if level > 0:
            Xn = X + np.random.default_rng([seed, k]).normal(0.0, level * dynamic_range, X.shape)
        out.append(evaluate(net, Xn, y))
    return out


def low_data_curve(train: Callable, X_train, y_train, X_test, y_test, fractions=DATA_FRACTIONS,
                   seed: int = 0) -> list:
    """Accuracy of ``train(X_subset, y_subset)`` on the test set, per training fraction."""
    out = []
    n = len(y_train)
    for k, frac in enumerate(fractions):
        m = max(2, int(round(frac * n)))
        idx = np.sort(np.random.default_rng([seed, 100 + k]).choice(n, m, replace=False))
        out.append(evaluate(train(X_train[idx], y_train[idx]), X_test, y_test))
    return out


def generalization_suite(net: TrainedNetwork, X_test, y_test, X_ood, train: Callable | None = None,
                         X_train=None, y_train=None, noise_levels=NOISE_LEVELS,
                         fractions=DATA_FRACTIONS, seed: int = 0) -> dict:
    """Noise-robustness curve, low-data curve (needs ``train``) and OOD AUROC.

    ``X_ood`` holds samples of classes excluded from training; in-distribution
    test samples are the positives of the max-softmax detector.
    """
    if X_ood is None or len(X_ood) == 0:
        raise EmptyHoldout("no held-out-class samples for OOD scoring")
    result = {
        "noise_levels": list(noise_levels),
        "noise_curve": noise_curve(net, X_test, y_test, noise_levels, seed=seed),
        "ood_auroc": auroc(max_softmax(net, X_test), max_softmax(net, X_ood)),
    }
    if train is not None:
        result["data_fractions"] = list(fractions)
        result["low_data_curve"] = low_data_curve(train, X_train, y_train, X_test, y_test, fractions, seed)
    return result
