"""Simulated physical computing units.

``MemristorUnit`` is an isomorphic unit: a differential-pair crossbar doing
matrix-vector multiplication with read noise, an ADC, and optional ADC
faults. ``OpticalUnit`` is a broken-isomorphism unit: a fixed random complex
transmission matrix followed by intensity detection; its matrix is never
exposed. ``DigitalReadout`` is the trainable digital layer paired with it.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IndexOutOfRange, ShapeMismatch


def _batch(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"{what}: expected (N, {width}) input, got {x.shape}")
    return x


# -- memristor crossbar ---------------------------------------------------------


@dataclass
class MemristorConfig:
    rows: int
    cols: int
    g_min: float = 2.0  # uS
    g_max: float = 40.0  # uS
    g_levels: int = 256
    read_noise_rel: float = 0.02
    adc_bits: int = 8
    adc_range: float = 4.0
    w_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.rows <= 1024 and 0 < self.cols <= 128):
            raise ValueError(f"crossbar tile is limited to 1024x128, got {self.rows}x{self.cols}")
        if not self.g_min < self.g_max:
            raise ValueError("g_min must be below g_max")
        if self.g_levels < 2:
            raise ValueError("g_levels must be >= 2")
        if self.read_noise_rel < 0 or self.adc_bits < 1 or self.adc_range <= 0 or self.w_max <= 0:
            raise ValueError("invalid noise/ADC/weight-range setting")

    @property
    def g_step(self) -> float:
        return (self.g_max - self.g_min) / (self.g_levels - 1)

    @property
    def adc_step(self) -> float:
        return 2.0 * self.adc_range / (2**self.adc_bits - 1)


@dataclass(frozen=True)
class FaultSpec:
    """``kind`` is ``"none"`` or ``"broken_adc"``; ``mode`` is ``"stuck"`` or ``"random"``."""

    kind: str = "none"
    columns: tuple = ()
    mode: str = "stuck"
    value: float = 0.0

    @classmethod
    def none(cls) -> "FaultSpec":
        return cls()

    @classmethod
    def stuck(cls, columns, value: float = 0.0) -> "FaultSpec":
        return cls("broken_adc", tuple(int(c) for c in columns), "stuck", float(value))

    @classmethod
    def random_replace(cls, columns) -> "FaultSpec":
        return cls("broken_adc", tuple(int(c) for c in columns), "random")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["columns"] = list(self.columns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        return cls(d["kind"], tuple(d["columns"]), d["mode"], d["value"])


def quantize_conductance(g: np.ndarray, cfg: MemristorConfig) -> np.ndarray:
    k = np.rint((g - cfg.g_min) / cfg.g_step)
    return cfg.g_min + np.clip(k, 0, cfg.g_levels - 1) * cfg.g_step


def adc_quantize(y: np.ndarray, bits: int, full_scale: float) -> np.ndarray:
    step = 2.0 * full_scale / (2**bits - 1)
    y = np.clip(y, -full_scale, full_scale)
    return np.rint((y + full_scale) / step) * step - full_scale


def ideal_forward(W, x) -> np.ndarray:
    """Digital twin of the crossbar: exact ``x @ W``."""
    W = np.asarray(W, dtype=np.float64)
    return _batch(x, W.shape[0], "ideal_forward") @ W


class MemristorUnit:
    def __init__(self, config: MemristorConfig):
        self.config = config
        self.W = np.zeros((config.rows, config.cols))
        self.G_plus = np.full((config.rows, config.cols), config.g_min)
        self.G_minus = self.G_plus.copy()
        self.fault = FaultSpec.none()
        self.rng = np.random.default_rng(config.seed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.rows, self.config.cols

    def deploy_weights(self, W) -> None:
        cfg = self.config
        W = np.asarray(W, dtype=np.float64)
        if W.shape != self.shape:
            raise ShapeMismatch(f"weights {W.shape} do not fit a {self.shape} crossbar")
        w = np.clip(W, -cfg.w_max, cfg.w_max) / cfg.w_max
        span = cfg.g_max - cfg.g_min
        g_pos = cfg.g_min + np.where(w > 0, w, 0.0) * span
        g_neg = cfg.g_min + np.where(w < 0, -w, 0.0) * span
        self.G_plus = quantize_conductance(g_pos, cfg)
        self.G_minus = quantize_conductance(g_neg, cfg)
        self.W = (self.G_plus - self.G_minus) / span * cfg.w_max

    def inject_fault(self, fault: FaultSpec) -> None:
        if fault.kind not in ("none", "broken_adc") or fault.mode not in ("stuck", "random"):
            raise ValueError(f"unknown fault {fault}")
        if any(c < 0 or c >= self.config.cols for c in fault.columns):
            raise IndexOutOfRange(f"fault columns {fault.columns} outside 0..{self.config.cols - 1}")
        self.fault = fault

    def output_std(self, x) -> np.ndarray:
        """Closed-form std of the pre-ADC output under read noise."""
        cfg = self.config
        x = _batch(x, cfg.rows, "output_std")
        g2 = self.G_plus**2 + self.G_minus**2
        scale = cfg.w_max / (cfg.g_max - cfg.g_min)
        return cfg.read_noise_rel * scale * np.sqrt((x * x) @ g2)

    def analog_forward(self, x) -> np.ndarray:
        """Pre-ADC currents with read noise, in weight units."""
        cfg = self.config
        x = np.clip(_batch(x, cfg.rows, "mvm_forward"), -1.0, 1.0)
        y = x @ self.W
        if cfg.read_noise_rel > 0:
            # Per-read i.i.d. multiplicative device noise sums to an exact Gaussian
            # per output; sample that instead of an N x rows x cols tensor.
            y = y + self.output_std(x) * self.rng.standard_normal(y.shape)
        return y

    def mvm_forward(self, x) -> np.ndarray:
        cfg = self.config
        y = adc_quantize(self.analog_forward(x), cfg.adc_bits, cfg.adc_range)
        if self.fault.kind == "broken_adc" and self.fault.columns:
            cols = list(self.fault.columns)
            if self.fault.mode == "stuck":
                y[:, cols] = self.fault.value
            else:
                y[:, cols] = self.rng.uniform(-cfg.adc_range, cfg.adc_range, size=(y.shape[0], len(cols)))
        return y

    def clone(self, jump: int = 0) -> "MemristorUnit":
        """Copy; ``jump > 0`` moves the copy to an independent noise stream."""
        twin = copy.deepcopy(self)
        if jump:
            twin.rng = np.random.Generator(self.rng.bit_generator.jumped(jump))
        return twin

    # checkpoint support
    def state(self) -> tuple[dict, dict]:
        meta = {"config": asdict(self.config), "fault": self.fault.to_dict(),
                "rng": self.rng.bit_generator.state}
        return meta, {"W": self.W, "G_plus": self.G_plus, "G_minus": self.G_minus}

    @classmethod
    def from_state(cls, meta: dict, tensors: dict) -> "MemristorUnit":
        unit = cls(MemristorConfig(**meta["config"]))
        unit.W = np.asarray(tensors["W"], dtype=np.float64)
        unit.G_plus = np.asarray(tensors["G_plus"], dtype=np.float64)
        unit.G_minus = np.asarray(tensors["G_minus"], dtype=np.float64)
        unit.fault = FaultSpec.from_dict(meta["fault"])
        unit.rng.bit_generator.state = meta["rng"]
        return unit


# -- optical scattering ---------------------------------------------------------


class OpticalUnit:
    """Speckle generator ``|T x|^2`` with a hidden complex Gaussian ``T``.

    ``encoding`` is ``"binary"`` (threshold), ``"eight_bit"`` (256 levels on
    [0, 1]) or ``None`` (no input encoding).
    """

    def __init__(self, n_in: int, n_out: int, encoding: str | None = "eight_bit",
                 threshold: float = 0.5, shot_noise_rel: float = 0.0, seed: int = 0):
        if encoding not in ("binary", "eight_bit", None):
            raise ValueError(f"unknown encoding {encoding!r}")
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.encoding = encoding
        self.threshold = float(threshold)
        self.shot_noise_rel = float(shot_noise_rel)
        self.seed = int(seed)
        tm = np.random.default_rng([self.seed, 0])
        scale = 1.0 / np.sqrt(2.0 * self.n_in)
        self.__t_re = tm.standard_normal((self.n_out, self.n_in)) * scale
        self.__t_im = tm.standard_normal((self.n_out, self.n_in)) * scale
        self.rng = np.random.default_rng([self.seed, 1])

    @classmethod
    def with_transmission(cls, T, **kwargs) -> "OpticalUnit":
        """Build a unit around a given complex matrix (test construction only)."""
        T = np.asarray(T, dtype=np.complex128)
        unit = cls(T.shape[1], T.shape[0], **kwargs)
        unit.__t_re, unit.__t_im = T.real.copy(), T.imag.copy()
        return unit

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.encoding == "binary":
            return (x > self.threshold).astype(np.float64)
        if self.encoding == "eight_bit":
            return np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
        return x

    def optical_forward(self, x) -> np.ndarray:
        x = self.encode(_batch(x, self.n_in, "optical_forward"))
        re = x @ self.__t_re.T
        im = x @ self.__t_im.T
        z = re * re + im * im
        if self.shot_noise_rel > 0:
            z = z * (1.0 + self.shot_noise_rel * self.rng.standard_normal(z.shape))
            np.maximum(z, 0.0, out=z)
        return z

    __call__ = optical_forward

    def clone(self, jump: int = 0) -> "OpticalUnit":
        twin = copy.deepcopy(self)
        if jump:
            twin.rng = np.random.Generator(self.rng.bit_generator.jumped(jump))
        return twin

    def state(self) -> tuple[dict, dict]:
        meta = {"n_in": self.n_in, "n_out": self.n_out, "encoding": self.encoding,
                "threshold": self.threshold, "shot_noise_rel": self.shot_noise_rel,
                "seed": self.seed, "rng": self.rng.bit_generator.state}
        return meta, {}

    @classmethod
    def from_state(cls, meta: dict, tensors: dict | None = None) -> "OpticalUnit":
        unit = cls(meta["n_in"], meta["n_out"], meta["encoding"], meta["threshold"],
                   meta["shot_noise_rel"], meta["seed"])
        unit.rng.bit_generator.state = meta["rng"]
        return unit


# -- digital readout ------------------------------------------------------------


@dataclass
class DigitalReadout:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, activation: str = "identity"):
        W = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        return cls(W, np.zeros(d_out), activation)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def pre(self, s) -> np.ndarray:
        return _batch(s, self.d_in, "readout_forward") @ self.W.T + self.b

    def forward(self, s) -> np.ndarray:
        a = self.pre(s)
        return np.maximum(a, 0.0) if self.activation == "relu" else a

    __call__ = forward

    def backward(self, s, dz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradients ``(dW, db, ds)`` of a scalar given ``dz = dL/dz``."""
        s = _batch(s, self.d_in, "readout_backward")
        if self.activation == "relu":
            dz = dz * (self.pre(s) > 0)
        return dz.T @ s, dz.sum(axis=0), dz @ self.W

    def copy(self) -> "DigitalReadout":
        return DigitalReadout(self.W.copy(), self.b.copy(), self.activation)


def readout_forward(r: DigitalReadout, s) -> np.ndarray:
    return r.forward(s)


def mvm_forward(unit: MemristorUnit, x) -> np.ndarray:
    return unit.mvm_forward(x)


def optical_forward(unit: OpticalUnit, x) -> np.ndarray:
    return unit.optical_forward(x)


def deploy_weights(unit: MemristorUnit, W) -> None:
    unit.deploy_weights(W)


def inject_fault(unit: MemristorUnit, fault: FaultSpec) -> None:
    unit.inject_fault(fault)
