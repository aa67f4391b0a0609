"""Unsupervised two-view PIB and the linear-probe evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import info
from .engine import (
    BatchSampler,
    InfoPlaneTrace,
    NetworkSpec,
    TrainConfig,
    TrainedNetwork,
    adapt_input,
    build_stages,
    feature_stats,
    standardize,
    train_softmax,
)
from .errors import DataError, DegenerateSplit, NonFiniteLoss, ShapeMismatch
from .info import KernelSpec
from .optim import Adam


@dataclass(frozen=True)
class AugmentSpec:
    shift_max: int = 0
    noise_std: float = 0.0
    mask_frac: float = 0.0

    def __post_init__(self):
        if self.shift_max < 0:
            raise ValueError("shift_max must be nonnegative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 0.0 <= self.mask_frac < 1.0:
            raise ValueError("mask_frac must lie in [0, 1)")


def _view(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    n, d = X.shape
    shifts = rng.integers(-spec.shift_max, spec.shift_max + 1, size=n)
    cols = (np.arange(d)[None, :] - shifts[:, None]) % d
    V = X[np.arange(n)[:, None], cols]
    if spec.noise_std > 0:
        V = V + rng.normal(0.0, spec.noise_std, size=V.shape)
    if spec.mask_frac > 0:
        V = np.where(rng.random(V.shape) < spec.mask_frac, 0.0, V)
    return V


def augment(X: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of every row of ``X``.

    Each view draws a per-row circular shift in ``[-shift_max, shift_max]``,
    additive Gaussian noise and random zero-masking.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch("augment expects a 2-D batch")
    if spec.shift_max >= X.shape[1]:
        raise ValueError(f"shift_max {spec.shift_max} must be below the feature count {X.shape[1]}")
    return _view(X, spec, rng), _view(X, spec, rng)


class UnsupTerms(NamedTuple):
    loss: float
    grad1: np.ndarray
    grad2: np.ndarray
    i_z1z2: float
    i_x1z1: float
    i_x2z2: float


def unsup_pib_objective(Z1, Z2, X1_gram, X2_gram, beta: float, alpha: float = info.DEFAULT_ALPHA,
                        kernel: KernelSpec = KernelSpec()) -> UnsupTerms:
    """Loss ``-I(Z1;Z2) + beta [I(X1;Z1) + I(X2;Z2)]`` and its gradients."""
    Z1, Z2 = np.asarray(Z1, dtype=np.float64), np.asarray(Z2, dtype=np.float64)
    if Z1.shape[0] != Z2.shape[0]:
        raise info.DimensionMismatch("the two views must be row-aligned")
    n = Z1.shape[0]
    if X1_gram.shape != (n, n) or X2_gram.shape != (n, n):
        raise info.DimensionMismatch("gram matrices do not match the feature batch")
    A1, _, back1 = info.gram_with_backward(Z1, kernel)
    A2, _, back2 = info.gram_with_backward(Z2, kernel)
    s1, g1 = info.entropy_and_grad(A1, alpha)
    s2, g2 = info.entropy_and_grad(A2, alpha)
    i12, d12_1 = info.mutual_information_and_grad(A1, A2, alpha, s1, g1)
    _, d12_2 = info.mutual_information_and_grad(A2, A1, alpha, s2, g2)
    i1, d1 = info.mutual_information_and_grad(A1, X1_gram, alpha, s1, g1)
    i2, d2 = info.mutual_information_and_grad(A2, X2_gram, alpha, s2, g2)
    loss = -i12 + beta * (i1 + i2)
    return UnsupTerms(float(loss), back1(beta * d1 - d12_1), back2(beta * d2 - d12_2),
                      float(i12), float(i1), float(i2))


def unsup_pib_loss(Z1, Z2, X1_gram, X2_gram, beta: float, alpha: float = info.DEFAULT_ALPHA,
                   kernel: KernelSpec = KernelSpec()) -> tuple[float, np.ndarray, np.ndarray]:
    t = unsup_pib_objective(Z1, Z2, X1_gram, X2_gram, beta, alpha, kernel)
    return t.loss, t.grad1, t.grad2


def _upstream(net: TrainedNetwork, X: np.ndarray, upto: int) -> np.ndarray:
    h = X
    for stage in net.stages[:upto]:
        h = stage.measure(adapt_input(stage, h))
    return h


def _add(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def train_unsupervised(spec: NetworkSpec, X, cfg: TrainConfig, augment_spec: AugmentSpec,
                       log=None) -> TrainedNetwork:
    """Greedy cascade on unlabeled inputs; each unit maximizes agreement of two views.

    Only the feature matrix is accepted, so labels cannot leak into training.
    The returned network has no final readout.
    """
    if not isinstance(cfg, TrainConfig) or not isinstance(augment_spec, AugmentSpec):
        raise TypeError("expected (spec, X, TrainConfig, AugmentSpec)")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ShapeMismatch(f"input width {X.shape} does not match network input {spec.d_in}")
    net = TrainedNetwork(spec, build_stages(spec, cfg.seed))
    x_kernel = KernelSpec.median()
    for l, stage in enumerate(net.stages):
        h_all = _upstream(net, X, l)
        stage.in_stats = None if l == 0 else feature_stats(h_all)
        stage.local_inputs(adapt_input(stage, h_all), fit=True)
        params = stage.init_params(np.random.default_rng([cfg.seed, l, 2]))
        opt = Adam(params, cfg.optimizer)
        sampler = BatchSampler(len(X), cfg.batch_size, np.random.default_rng([cfg.seed, l, 1]))
        aug_rng = np.random.default_rng([cfg.seed, l, 4])
        for it in range(cfg.iterations_per_unit):
            idx = sampler.next()
            X1, X2 = augment(X[idx], augment_spec, aug_rng)
            H1 = stage.local_inputs(adapt_input(stage, _upstream(net, X1, l)))
            H2 = stage.local_inputs(adapt_input(stage, _upstream(net, X2, l)))
            Z1, c1 = stage.twin(params, H1)
            Z2, c2 = stage.twin(params, H2)
            t = unsup_pib_objective(Z1, Z2, info.gram(X1, x_kernel), info.gram(X2, x_kernel),
                                    cfg.beta, cfg.alpha, cfg.kernel)
            if not (np.isfinite(t.loss) and np.all(np.isfinite(t.grad1)) and np.all(np.isfinite(t.grad2))):
                raise NonFiniteLoss(f"unit {l} iteration {it}: loss={t.loss}, I(Z1;Z2)={t.i_z1z2}")
            opt.step(_add(stage.twin_backward(params, H1, c1, t.grad1), stage.twin_backward(params, H2, c2, t.grad2)))
            if stage.kind == "memristor":
                stage.fit_range(params, np.concatenate([c1, c2]))
            net.trace.append(l, it, 0.5 * (t.i_x1z1 + t.i_x2z2), t.i_z1z2, t.loss)
        stage.set_params(params)
        if log:
            log(f"unit {l}: trained {cfg.iterations_per_unit} unsupervised iterations")
    return net


PROBE_EPOCHS = 500
PROBE_LR = 1e-2


def probe_split(n: int, split_seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([split_seed, 17]).permutation(n)
    cut = int(round(train_fraction * n))
    return order[:cut], order[cut:]


def linear_probe(features, labels, split_seed: int = 0, n_classes: int | None = None,
                 epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR) -> float:
    """Held-out accuracy of a softmax classifier on frozen features (seeded 80/20 split).

    Features are standardized with train-split statistics; training is
    full-batch Adam with cross-entropy.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if F.ndim != 2 or F.shape[0] != len(y):
        raise ShapeMismatch("features and labels must be row-aligned")
    if len(y) < 5:
        raise DataError("too few samples for an 80/20 probe split")
    k = int(y.max()) + 1 if n_classes is None else n_classes
    tr, te = probe_split(len(y), split_seed)
    missing = sorted(set(range(k)) - set(np.unique(y[tr]).tolist()))
    if missing:
        raise DegenerateSplit(f"classes {missing} absent from the probe's training split")
    stats = feature_stats(F[tr])
    r = train_softmax(standardize(F[tr], stats), y[tr], k, epochs, lr, None, np.random.default_rng(split_seed))
    return float(np.mean(np.argmax(r.forward(standardize(F[te], stats)), axis=1) == y[te]))


def probe_network(net: TrainedNetwork, X, y, split_seed: int = 0, n_classes: int | None = None) -> float:
    return linear_probe(net.raw_features(X), y, split_seed, n_classes)
