"""Matrix-based Renyi entropy and mutual information on kernel Gram matrices.

Entropies are in bits. A normalized Gram matrix is symmetric PSD with unit
trace; its eigenvalue spectrum plays the role of a probability vector.

All functions are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateJoint,
    DimensionMismatch,
    EigDecompositionFailure,
    EmptyBatch,
    NonFiniteInput,
)

LN2 = np.log(2.0)
EIG_FLOOR = 1e-12
# alpha=2 admits negative Hadamard-product MI on some gram pairs; 1.2 does not,
# and unlike orders near 1 it stays well conditioned when small eigenvalues appear.
DEFAULT_ALPHA = 1.2


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice plus bandwidth rule.

    ``kind`` is ``"gaussian"`` or ``"label"``. For the Gaussian kernel either
    ``sigma`` is fixed, or the median heuristic scaled by ``gamma`` is used.
    With ``standardize`` each feature is z-scored over the batch before the
    kernel is applied (gradients flow through the batch statistics).
    """

    kind: str = "gaussian"
    sigma: float | None = None
    gamma: float = 1.0
    standardize: bool = False

    def __post_init__(self):
        if self.kind not in ("gaussian", "label"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def fixed(cls, sigma: float) -> "KernelSpec":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def median(cls, gamma: float = 1.0) -> "KernelSpec":
        return cls("gaussian", gamma=float(gamma))

    @classmethod
    def label(cls) -> "KernelSpec":
        return cls("label")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "gamma": self.gamma, "standardize": self.standardize}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        unknown = set(d) - {"kind", "sigma", "gamma", "standardize"}
        if unknown:
            raise ValueError(f"unknown kernel keys {sorted(unknown)}")
        return cls(d.get("kind", "gaussian"), d.get("sigma"), d.get("gamma", 1.0), bool(d.get("standardize", False)))


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not alpha > 0 or alpha == 1.0:
        raise ValueError(f"Renyi order must be positive and != 1, got {alpha}")
    return alpha


def _as_batch(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise DimensionMismatch(f"feature batch must be 2-D, got shape {Z.shape}")
    if Z.shape[0] < 2:
        raise EmptyBatch(f"need at least 2 samples, got {Z.shape[0]}")
    if not np.all(np.isfinite(Z)):
        raise NonFiniteInput("feature batch contains NaN or inf")
    return Z


def pairwise_sq_dists(Z: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", Z, Z)
    D = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def median_bandwidth(Z, gamma: float = 1.0) -> float:
    """``gamma`` times the median pairwise Euclidean distance (``gamma`` if all are zero)."""
    Z = _as_batch(Z)
    iu = np.triu_indices(Z.shape[0], k=1)
    d = np.sqrt(pairwise_sq_dists(Z)[iu])
    med = float(np.median(d))
    if med <= 0.0:
        return float(gamma)
    return float(gamma) * med


STD_EPS = 1e-12


def batch_standardize(Z: np.ndarray) -> np.ndarray:
    return (Z - Z.mean(axis=0)) / np.sqrt(Z.var(axis=0) + STD_EPS)


def batch_standardize_backward(Zs: np.ndarray, Z: np.ndarray, dZs: np.ndarray) -> np.ndarray:
    scale = np.sqrt(Z.var(axis=0) + STD_EPS)
    return (dZs - dZs.mean(axis=0) - Zs * np.mean(dZs * Zs, axis=0)) / scale


def _gaussian(Z: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-pairwise_sq_dists(Z) / (2.0 * sigma * sigma))


def bandwidth(Z, kernel: KernelSpec) -> float:
    if kernel.sigma is not None:
        return kernel.sigma
    return median_bandwidth(Z, kernel.gamma)


def label_gram(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DimensionMismatch("labels must be a vector")
    if y.shape[0] < 2:
        raise EmptyBatch("need at least 2 labels")
    K = (y[:, None] == y[None, :]).astype(np.float64)
    return K / y.shape[0]


def gram(batch, kernel: KernelSpec = KernelSpec()) -> np.ndarray:
    """Trace-normalized Gram matrix ``K / N`` (both kernels have unit diagonal)."""
    if kernel.kind == "label":
        return label_gram(batch)
    Z = _as_batch(batch)
    if kernel.standardize:
        Z = batch_standardize(Z)
    K = _gaussian(Z, bandwidth(Z, kernel))
    return K / Z.shape[0]


def _eigvals(A: np.ndarray) -> np.ndarray:
    try:
        lam = np.linalg.eigvalsh(A)
    except np.linalg.LinAlgError as exc:
        raise EigDecompositionFailure(str(exc)) from exc
    return np.clip(lam, 0.0, None)


def entropy(A: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Renyi entropy of order ``alpha`` of the spectrum of ``A``, in bits."""
    alpha = check_alpha(alpha)
    if alpha == 2.0:
        return float(-np.log2(np.sum(A * A)))
    lam = _eigvals(A)
    return float(np.log2(np.sum(lam**alpha)) / (1.0 - alpha))


def entropy_eig(A: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Eigendecomposition path for any ``alpha``; reference for the alpha=2 shortcut."""
    alpha = check_alpha(alpha)
    lam = _eigvals(A)
    return float(np.log2(np.sum(lam**alpha)) / (1.0 - alpha))


def _hadamard(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, float]:
    if A.shape != B.shape:
        raise DimensionMismatch(f"gram shapes differ: {A.shape} vs {B.shape}")
    M = A * B
    t = float(np.trace(M))
    if t <= 1e-300:
        raise DegenerateJoint("trace of the Hadamard product vanished")
    return M, t


def joint_entropy(A: np.ndarray, B: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    M, t = _hadamard(A, B)
    return entropy(M / t, alpha)


def mutual_information(A: np.ndarray, B: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    return entropy(A, alpha) + entropy(B, alpha) - joint_entropy(A, B, alpha)


# -- gradients ---------------------------------------------------------------


def entropy_grad(A: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """dS/dA, treating every entry of ``A`` as an independent variable."""
    return entropy_and_grad(A, alpha)[1]


def entropy_and_grad(A: np.ndarray, alpha: float = DEFAULT_ALPHA) -> tuple[float, np.ndarray]:
    """Entropy and its gradient from a single eigendecomposition."""
    alpha = check_alpha(alpha)
    if alpha == 2.0:
        f = np.sum(A * A)
        return float(-np.log2(f)), -2.0 * A / (LN2 * f)
    try:
        lam, U = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise EigDecompositionFailure(str(exc)) from exc
    value = float(np.log2(np.sum(np.clip(lam, 0.0, None) ** alpha)) / (1.0 - alpha))
    lam = np.maximum(lam, EIG_FLOOR)
    power = (U * lam ** (alpha - 1.0)) @ U.T
    return value, alpha * power / ((1.0 - alpha) * LN2 * np.sum(lam**alpha))


def joint_entropy_grad(A: np.ndarray, B: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """d S(A,B) / dA with ``B`` held fixed."""
    return _joint_value_and_grad(A, B, alpha)[1]


def _joint_value_and_grad(A, B, alpha):
    M, t = _hadamard(A, B)
    C = M / t
    value, G = entropy_and_grad(C, alpha)
    dM = G / t
    dM[np.diag_indices_from(dM)] -= np.sum(G * C) / t
    return value, dM * B


def mutual_information_and_grad(A, B, alpha: float = DEFAULT_ALPHA, s_a=None, g_a=None):
    """I(A;B) and dI/dA. ``s_a``/``g_a`` let callers reuse S(A) and its gradient."""
    if s_a is None:
        s_a, g_a = entropy_and_grad(A, alpha)
    s_ab, g_ab = _joint_value_and_grad(A, B, alpha)
    return s_a + entropy(B, alpha) - s_ab, g_a - g_ab


def mutual_information_grad(A: np.ndarray, B: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """d I(A;B) / dA with ``B`` held fixed."""
    return entropy_grad(A, alpha) - joint_entropy_grad(A, B, alpha)


def gaussian_gram_backward(Z: np.ndarray, K: np.ndarray, sigma: float, dA: np.ndarray) -> np.ndarray:
    """Pull dL/dA back to dL/dZ for ``A = exp(-|zi-zj|^2 / 2 sigma^2) / N``.

    ``sigma`` is a constant here even when it came from the median rule.
    """
    n = Z.shape[0]
    G = 0.5 * (dA + dA.T) / n
    P = G * K
    return (2.0 / (sigma * sigma)) * (P @ Z - P.sum(axis=1)[:, None] * Z)


def gram_with_backward(Z, kernel: KernelSpec):
    """Gaussian gram of ``Z`` plus a function mapping dL/dA to dL/dZ.

    Returns ``(A, sigma, backward)``.
    """
    Z = _as_batch(Z)
    Zk = batch_standardize(Z) if kernel.standardize else Z
    sigma = bandwidth(Zk, kernel)
    K = _gaussian(Zk, sigma)

    def backward(dA: np.ndarray) -> np.ndarray:
        g = gaussian_gram_backward(Zk, K, sigma, dA)
        return batch_standardize_backward(Zk, Z, g) if kernel.standardize else g

    return K / Z.shape[0], sigma, backward


class PibTerms(NamedTuple):
    loss: float
    grad: np.ndarray
    i_yz: float
    i_xz: float
    sigma: float


def pib_objective(Z, X_gram, Y_gram, beta: float, alpha: float = DEFAULT_ALPHA,
                  kernel: KernelSpec = KernelSpec()) -> PibTerms:
    """Loss ``-(I(Y;Z) - beta I(X;Z))`` with its gradient and the two MI terms."""
    Z = _as_batch(Z)
    n = Z.shape[0]
    if X_gram.shape != (n, n) or Y_gram.shape != (n, n):
        raise DimensionMismatch("gram matrices do not match the feature batch")
    A, sigma, backward = gram_with_backward(Z, kernel)
    s_a, g_a = entropy_and_grad(A, alpha)
    i_yz, d_yz = mutual_information_and_grad(A, Y_gram, alpha, s_a, g_a)
    i_xz, d_xz = mutual_information_and_grad(A, X_gram, alpha, s_a, g_a)
    loss = -(i_yz - beta * i_xz)
    dA = beta * d_xz - d_yz
    return PibTerms(float(loss), backward(dA), float(i_yz), float(i_xz), sigma)


def pib_loss_and_grad(Z, X_gram, Y_gram, beta: float, alpha: float = DEFAULT_ALPHA,
                      kernel: KernelSpec = KernelSpec()) -> tuple[float, np.ndarray]:
    t = pib_objective(Z, X_gram, Y_gram, beta, alpha, kernel)
    return t.loss, t.grad
