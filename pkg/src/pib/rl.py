"""CartPole and a DQN-style agent whose optical units learn from local losses.

Every unit carries its own linear Q-head. Per replay batch, unit ``l`` minimizes
``PIB(Z_l; state gram, TD-target gram) + td_weight * TD(head_l)``; nothing is
backpropagated between units. The last unit's head is the acting head.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import info
from .engine import NetworkSpec, TrainConfig, adapt_input, build_stages, feature_stats
from .errors import NonFiniteLoss, ShapeMismatch
from .info import KernelSpec
from .optim import Adam
from .units import DigitalReadout

# -- environment ----------------------------------------------------------------

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12.0 * 2.0 * math.pi / 360.0
MAX_STEPS = 500


class CartPoleState(NamedTuple):
    x: float
    x_dot: float
    theta: float
    theta_dot: float


def cartpole_step(s, a: int) -> tuple[CartPoleState, float, bool]:
    """One Euler step. Action 1 pushes right, 0 pushes left; reward is always 1."""
    x, x_dot, theta, theta_dot = (float(v) for v in s)
    if a not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {a}")
    force = FORCE if a == 1 else -FORCE
    cos, sin = math.cos(theta), math.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS))
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS
    nxt = CartPoleState(x + TAU * x_dot, x_dot + TAU * x_acc, theta + TAU * theta_dot, theta_dot + TAU * theta_acc)
    done = abs(nxt.x) > X_LIMIT or abs(nxt.theta) > THETA_LIMIT
    return nxt, 1.0, done


class CartPole:
    """Episode wrapper: seeded resets in [-0.05, 0.05]^4 and the 500-step cap."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng([seed, 31])
        self.state = None
        self.steps = 0

    def reset(self) -> CartPoleState:
        self.state = CartPoleState(*self.rng.uniform(-0.05, 0.05, 4))
        self.steps = 0
        return self.state

    def step(self, a: int) -> tuple[CartPoleState, float, bool, bool]:
        """Returns ``(next_state, reward, terminal, truncated)``."""
        self.state, r, done = cartpole_step(self.state, a)
        self.steps += 1
        return self.state, r, done, (not done and self.steps >= MAX_STEPS)


# -- replay ---------------------------------------------------------------------


class ReplayBuffer:
    """Ring buffer of transitions with uniform, seeded sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.s = np.zeros((capacity, 4))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, 4))
        self.done = np.zeros(capacity)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a: int, r: float, s2, done: bool) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int) -> np.ndarray:
        if batch > self.size:
            raise ValueError(f"cannot sample {batch} from {self.size} transitions")
        return self.rng.integers(0, self.size, size=batch)

    def sample(self, batch: int):
        i = self.sample_indices(batch)
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i]


# -- configuration --------------------------------------------------------------


@dataclass
class RlConfig:
    td_weight: float = 1.0
    discount: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    target_sync_interval: int = 500
    buffer_capacity: int = 50_000
    batch_size: int = 64
    episodes: int = 2000
    learning_starts: int = 500
    train_every: int = 1
    solved_threshold: float = 400.0
    solved_window: int = 50
    stop_when_solved: bool = True
    encoder_bins: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.td_weight < 0:
            raise ValueError("td_weight must be nonnegative")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        for name in ("eps_decay_steps", "target_sync_interval", "buffer_capacity", "batch_size",
                     "episodes", "train_every", "solved_window", "encoder_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("exploration rates must lie in [0, 1]")

    def epsilon(self, step: int) -> float:
        frac = min(1.0, step / self.eps_decay_steps)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def to_dict(self) -> dict:
        return asdict(self)


# -- agent ----------------------------------------------------------------------

STATE_BOUNDS = np.array([X_LIMIT, 3.0, THETA_LIMIT, 3.5])


class StateEncoder:
    """Gaussian population code: ``bins`` bumps per state variable, values in (0, 1]."""

    def __init__(self, bins: int = 16):
        self.bins = bins
        self.centers = np.linspace(-1.0, 1.0, bins)
        self.width = 2.0 / (bins - 1) if bins > 1 else 1.0

    @property
    def dim(self) -> int:
        return 4 * self.bins

    def __call__(self, S: np.ndarray) -> np.ndarray:
        u = np.clip(np.atleast_2d(S) / STATE_BOUNDS, -1.0, 1.0)
        d = (u[:, :, None] - self.centers[None, None, :]) / self.width
        return np.exp(-0.5 * d * d).reshape(u.shape[0], -1)


@dataclass
class UnitParams:
    readout: DigitalReadout
    head: DigitalReadout

    def copy(self) -> "UnitParams":
        return UnitParams(self.readout.copy(), self.head.copy())

    def as_dict(self) -> dict:
        return {"W": self.readout.W, "b": self.readout.b, "Wq": self.head.W, "bq": self.head.b}


class OpticalQAgent:
    def __init__(self, spec: NetworkSpec, rl: RlConfig, pib: TrainConfig):
        if not spec.layers or any(l.kind != "optical" for l in spec.layers):
            raise ShapeMismatch("the RL agent needs one or more optical layers")
        if spec.final_readout[1] != 2:
            raise ShapeMismatch("the final head must output 2 Q-values")
        self.encoder = StateEncoder(rl.encoder_bins)
        if spec.d_in != self.encoder.dim:
            raise ShapeMismatch(f"first optical layer must take {self.encoder.dim} inputs")
        self.spec, self.rl, self.pib = spec, rl, pib
        self.stages = build_stages(spec, pib.seed)
        self.params = []
        for l, stage in enumerate(self.stages):
            rng = np.random.default_rng([pib.seed, l, 2])
            readout = DigitalReadout.init(stage.layer.n_out, stage.layer.readout_dim, rng, stage.layer.activation)
            head = DigitalReadout(np.zeros((2, stage.layer.readout_dim)), np.zeros(2))
            self.params.append(UnitParams(readout, head))
        self._calibrate(np.random.default_rng([pib.seed, 20]))
        self.target = [p.copy() for p in self.params]
        self.opts = [Adam(p.as_dict(), pib.optimizer) for p in self.params]

    def _calibrate(self, rng: np.random.Generator, n: int = 1000) -> None:
        """Freeze input and speckle statistics on states drawn across the observation box."""
        h = self.encoder(rng.uniform(-1.0, 1.0, (n, 4)) * STATE_BOUNDS)
        for stage, p in zip(self.stages, self.params):
            x_in = adapt_input(stage, h)
            H = stage.local_inputs(x_in, fit=True)
            h = p.readout.forward(H)
            nxt = self.stages.index(stage) + 1
            if nxt < len(self.stages):
                self.stages[nxt].in_stats = feature_stats(h)

    def unit_inputs(self, S: np.ndarray, params=None) -> tuple[list, list]:
        """Measured local inputs and outputs of every unit for a batch of states."""
        params = self.params if params is None else params
        h = self.encoder(S)
        Hs, Zs = [], []
        for stage, p in zip(self.stages, params):
            H = stage.local_inputs(adapt_input(stage, h))
            h = p.readout.forward(H)
            Hs.append(H)
            Zs.append(h)
        return Hs, Zs

    def q_values(self, S: np.ndarray, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return params[-1].head.forward(self.unit_inputs(S, params)[1][-1])

    def act(self, s, eps: float, rng: np.random.Generator) -> int:
        if rng.random() < eps:
            return int(rng.integers(0, 2))
        return int(np.argmax(self.q_values(np.asarray(s)[None, :])[0]))

    def sync_target(self) -> None:
        self.target = [p.copy() for p in self.params]

    def td_targets(self, r, s2, done) -> np.ndarray:
        return r + self.rl.discount * (1.0 - done) * self.q_values(s2, self.target).max(axis=1)

    def local_update(self, l: int, H, Z, a, y, Xg, Yg) -> tuple[float, float]:
        """Adam step on unit ``l`` alone: PIB on its outputs plus TD on its own head."""
        p = self.params[l]
        n = len(a)
        rows = np.arange(n)
        q = p.head.forward(Z)
        td = q[rows, a] - y
        td_loss = float(np.mean(td * td))
        dq = np.zeros_like(q)
        dq[rows, a] = 2.0 * td / n
        dWq, dbq, dZ = p.head.backward(Z, dq)
        terms = info.pib_objective(Z, Xg, Yg, self.pib.beta, self.pib.alpha, self.pib.kernel)
        if not (np.isfinite(td_loss) and np.isfinite(terms.loss)):
            raise NonFiniteLoss(f"unit {l}: td={td_loss}, pib={terms.loss}")
        lam = self.rl.td_weight
        dW, db, _ = p.readout.backward(H, terms.grad + lam * dZ)
        self.opts[l].step({"W": dW, "b": db, "Wq": lam * dWq, "bq": lam * dbq})
        return terms.loss, td_loss

    def train_step(self, batch) -> list:
        """One local update of every unit; returns per-unit (pib_loss, td_loss)."""
        s, a, r, s2, done = batch
        y = self.td_targets(r, s2, done)
        Hs, Zs = self.unit_inputs(s)
        Xg = info.gram(s, KernelSpec.median())
        Yg = info.gram(y[:, None], KernelSpec.median())
        return [self.local_update(l, H, Z, a, y, Xg, Yg) for l, (H, Z) in enumerate(zip(Hs, Zs))]


# -- training loop ----------------------------------------------------------------


@dataclass
class RlResult:
    scores: list = field(default_factory=list)
    solved_episode: int | None = None

    @property
    def running_average(self) -> list:
        return running_average(self.scores)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "score", "avg50"])
        for i, (s, m) in enumerate(zip(self.scores, self.running_average)):
            w.writerow([i, repr(float(s)), repr(float(m))])
        return buf.getvalue()


def running_average(scores, window: int = 50) -> list:
    out, total = [], 0.0
    for i, s in enumerate(scores):
        total += s
        if i >= window:
            total -= scores[i - window]
        out.append(total / min(i + 1, window))
    return out


def train_rl_agent(spec: NetworkSpec, rl: RlConfig, pib: TrainConfig, log=None) -> RlResult:
    """Run the episode loop; single-threaded and fully determined by the seeds."""
    agent = OpticalQAgent(spec, rl, pib)
    env = CartPole(rl.seed)
    buffer = ReplayBuffer(rl.buffer_capacity, np.random.default_rng([rl.seed, 32]))
    act_rng = np.random.default_rng([rl.seed, 30])
    result = RlResult()
    step = 0
    learn = rl.eps_end < 1.0 or rl.eps_start < 1.0
    for episode in range(rl.episodes):
        s = env.reset()
        score = 0.0
        while True:
            a = agent.act(s, rl.epsilon(step), act_rng)
            s2, r, done, truncated = env.step(a)
            buffer.push(s, a, r, s2, done)
            score += r
            step += 1
            if learn and step >= rl.learning_starts and step % rl.train_every == 0 and len(buffer) >= rl.batch_size:
                agent.train_step(buffer.sample(rl.batch_size))
            if step % rl.target_sync_interval == 0:
                agent.sync_target()
            s = s2
            if done or truncated:
                break
        result.scores.append(score)
        avg = float(np.mean(result.scores[-rl.solved_window:]))
        if log and episode % 50 == 0:
            log(f"episode {episode}: score {score:.0f}, avg50 {avg:.1f}, eps {rl.epsilon(step):.3f}")
        if (result.solved_episode is None and len(result.scores) >= rl.solved_window
                and avg >= rl.solved_threshold):
            result.solved_episode = episode
            if rl.stop_when_solved:
                break
    return result
