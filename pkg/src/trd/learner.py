"""Training: scalar DQN teacher, reward-vector bootstrapping, and teacher-to-student retraining."""

from __future__ import annotations

import logging
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import envs
from .envs import MdpSpec
from .estimators import Adam, NeuralTrd, QNetwork, TabularTrd, apply_update, scalar_q

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Defaults are a desk-scale rescaling of the DQN/QDagger Atari settings
    (see ``atari_defaults`` for the unscaled values): step counts shrink by
    ~200x, the target network syncs every 200 updates instead of 1000, and
    the Adam learning rate is 1e-3 instead of 1e-4.
    """

    gamma: float = 0.99
    n: int = 8
    w: int = 1
    buffer_capacity: int = 50_000
    batch_size: int = 32
    target_update: int = 200
    epsilon: float = 0.01
    epsilon_start: float = 1.0
    exploration_fraction: float = 0.3
    train_frequency: int = 4
    learning_starts: int = 500
    qdagger_temperature: float = 1.0
    teacher_steps: int = 20_000
    offline_steps: int = 5_000
    online_steps: int = 20_000
    eval_seeds: tuple[int, ...] = tuple(range(10))
    teacher_eval_period: int = 5_000
    offline_eval_period: int = 500
    online_eval_period: int = 2_000
    learning_rate: float = 1e-3
    tabular_learning_rate: float = 0.1
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self) -> None:
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("epsilon", "epsilon_start", "exploration_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        positive = ("n", "w", "buffer_capacity", "batch_size", "target_update", "train_frequency",
                    "teacher_eval_period", "offline_eval_period", "online_eval_period")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("teacher_steps", "offline_steps", "online_steps", "learning_starts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("learning_rate", "tabular_learning_rate", "qdagger_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not self.eval_seeds:
            raise ValueError("eval_seeds must not be empty")

    @classmethod
    def atari_defaults(cls, **overrides) -> "TrainConfig":
        """The Atari-scale DQN + QDagger hyperparameters, unscaled."""
        base = dict(
            gamma=0.99, buffer_capacity=1_000_000, batch_size=32, target_update=1000, epsilon=0.01,
            train_frequency=4, qdagger_temperature=1.0, offline_steps=1_000_000, online_steps=4_000_000,
            offline_eval_period=100_000, online_eval_period=250_000, learning_rate=1e-4,
            eval_seeds=tuple(range(10)),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_seeds"] = list(self.eval_seeds)
        d["hidden"] = list(self.hidden)
        return d


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (collect / init / eval ...) under one root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31))


# ---------------------------------------------------------------------------
# experience


@dataclass
class TransitionRecord:
    obs: np.ndarray
    state: int
    action: int
    grouped_reward: float
    next_obs: np.ndarray
    next_state: int
    terminated: bool
    truncated: bool = False
    teacher_q: np.ndarray | None = None


@dataclass
class Batch:
    obs: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_state: np.ndarray
    terminated: np.ndarray
    teacher_q: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.action)


class NStepAccumulator:
    """Turns a stream of single steps into w-step records.

    ``grouped_reward`` discounts inside the group (sum of gamma**j * R_{t+j});
    when the episode terminates inside a group the missing rewards count as
    zero.  Incomplete groups cut off by truncation are dropped.
    """

    def __init__(self, w: int, gamma: float):
        self.w, self.gamma = int(w), float(gamma)
        self._pending: deque = deque()

    def reset(self) -> None:
        self._pending.clear()

    def push(self, obs, state, action, reward, next_obs, next_state, terminated, truncated=False) -> list[TransitionRecord]:
        self._pending.append((obs, int(state), int(action), float(reward)))
        out = []
        if len(self._pending) == self.w:
            out.append(self._emit(next_obs, next_state, terminated, truncated and self.w == 1))
            self._pending.popleft()
        if terminated:
            while self._pending:
                out.append(self._emit(next_obs, next_state, True, False))
                self._pending.popleft()
        elif truncated:
            self._pending.clear()
        return out

    def _emit(self, next_obs, next_state, terminated, truncated) -> TransitionRecord:
        obs, state, action, _ = self._pending[0]
        g = sum(self.gamma**j * r for j, (_, _, _, r) in enumerate(self._pending))
        return TransitionRecord(obs, state, action, g, next_obs, int(next_state), bool(terminated), bool(truncated))


class ReplayBuffer:
    """FIFO ring buffer of complete transition records with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, w: int = 1, gamma: float = 0.99):
        self.capacity, self.obs_dim, self.w, self.gamma = int(capacity), int(obs_dim), int(w), float(gamma)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.state = np.zeros(capacity, dtype=np.int64)
        self.next_state = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, rec: TransitionRecord) -> None:
        if not np.isfinite(rec.grouped_reward):
            raise ValueError("grouped reward must be finite")
        i = self._next
        self.obs[i] = rec.obs
        self.next_obs[i] = rec.next_obs
        self.state[i] = rec.state
        self.next_state[i] = rec.next_state
        self.action[i] = rec.action
        self.reward[i] = rec.grouped_reward
        self.terminated[i] = rec.terminated
        self.truncated[i] = rec.truncated
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, records) -> None:
        for rec in records:
            self.add(rec)

    def chronological(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def take(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(
            obs=self.obs[idx], state=self.state[idx], action=self.action[idx], reward=self.reward[idx],
            next_obs=self.next_obs[idx], next_state=self.next_state[idx],
            terminated=self.terminated[idx].astype(np.float64),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.take(rng.integers(0, self._size, size=batch_size))

    def regroup(self, w: int, gamma: float | None = None) -> "ReplayBuffer":
        """Rebuild w-step records from a buffer of single steps stored in episode order."""
        if self.w != 1:
            raise ValueError("only single-step buffers can be regrouped")
        gamma = self.gamma if gamma is None else gamma
        out = ReplayBuffer(self.capacity, self.obs_dim, w=w, gamma=gamma)
        acc = NStepAccumulator(w, gamma)
        prev_next = None
        for i in self.chronological():
            # a gap means the stored steps are not contiguous: start a new group sequence
            if prev_next is not None and prev_next != self.state[i]:
                acc.reset()
            out.extend(acc.push(self.obs[i], self.state[i], self.action[i], self.reward[i],
                                self.next_obs[i], self.next_state[i], bool(self.terminated[i]),
                                bool(self.truncated[i])))
            prev_next = None if (self.terminated[i] or self.truncated[i]) else int(self.next_state[i])
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        idx = self.chronological()
        with path.open("wb") as fh:
            np.savez(
                fh, obs=self.obs[idx], next_obs=self.next_obs[idx], state=self.state[idx],
                next_state=self.next_state[idx], action=self.action[idx], reward=self.reward[idx],
                terminated=self.terminated[idx], truncated=self.truncated[idx],
                meta=np.array([self.capacity, self.obs_dim, self.w], dtype=np.int64), gamma=np.array(self.gamma),
            )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        try:
            data = np.load(Path(path))
            capacity, obs_dim, w = (int(x) for x in data["meta"])
            buf = cls(capacity, obs_dim, w=w, gamma=float(data["gamma"]))
            k = len(data["action"])
            for name in ("obs", "next_obs", "state", "next_state", "action", "reward", "terminated", "truncated"):
                getattr(buf, name)[:k] = data[name]
        except (OSError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}: cannot load replay buffer ({exc})") from exc
        buf._size = k
        buf._next = k % capacity
        return buf


# ---------------------------------------------------------------------------
# targets and losses


def _next_scalar_q(target_net, next_obs) -> np.ndarray:
    if isinstance(target_net, QNetwork):
        return target_net.q_values(next_obs)
    return scalar_q(target_net, next_obs)


def dqn_target(batch: Batch, target_net, gamma: float, w: int = 1) -> np.ndarray:
    """r + gamma**w * max_a' Q(s', a'), bootstrap dropped on termination."""
    nxt = _next_scalar_q(target_net, _obs_for(target_net, batch.next_obs, batch.next_state))
    y = batch.reward + (1.0 - batch.terminated) * gamma**w * nxt.max(axis=1)
    if not np.all(np.isfinite(y)):
        raise TrainingDivergedError("non-finite scalar target")
    return y


def trd_target(batch: Batch, target_net, gamma: float, w: int) -> np.ndarray:
    """Shift-and-merge vector targets, shape (B, n+1).

    Element 0 is the observed grouped reward; element i takes gamma**w times
    element i-1 of the next state's vector for a' = argmax of summed vectors;
    the last element also absorbs the next state's tail.
    """
    nxt = target_net.predict(_obs_for(target_net, batch.next_obs, batch.next_state))
    a_next = np.argmax(nxt.sum(axis=-1), axis=1)
    pn = nxt[np.arange(len(a_next)), a_next]
    n = pn.shape[1] - 1
    boot = (1.0 - batch.terminated)[:, None] * gamma**w * pn
    tgt = np.empty_like(pn)
    tgt[:, 0] = batch.reward
    tgt[:, 1:n] = boot[:, : n - 1]
    tgt[:, n] = boot[:, n - 1] + boot[:, n]
    if not np.all(np.isfinite(tgt)):
        raise TrainingDivergedError("non-finite vector target")
    return tgt


def trd_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over batch and elements of squared error, and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def summed_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar squared error on the summed vector; the same gradient lands on every element."""
    diff = pred.sum(axis=-1) - target
    grad = np.repeat((2.0 * diff / diff.size)[:, None], pred.shape[-1], axis=1)
    return float(np.mean(diff**2)), grad


def softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LambdaSchedule:
    teacher_return: float
    student_return: float = 0.0
    value: float = 1.0


def update_lambda(schedule: LambdaSchedule, student_return: float, teacher_return: float) -> LambdaSchedule:
    """lambda = clamp(1 - student/teacher, 0, 1)."""
    if teacher_return == 0:
        raise ValueError("teacher return must be non-zero")
    lam = float(np.clip(1.0 - student_return / teacher_return, 0.0, 1.0))
    return replace(schedule, teacher_return=teacher_return, student_return=student_return, value=lam)


@dataclass
class DistillationTerm:
    loss: float  # lambda * cross-entropy
    cross_entropy: float
    kl: float
    grad: np.ndarray  # d loss / d student_q, shape (B, A)


def qdagger_loss(student_q, teacher_q, temperature: float, lam) -> DistillationTerm:
    """lambda * E_s[-sum_a pi_T(a|s) log pi(a|s)] with both policies softmax(Q / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lam_value = lam.value if isinstance(lam, LambdaSchedule) else float(lam)
    sq = np.atleast_2d(np.asarray(student_q, dtype=np.float64))
    tq = np.atleast_2d(np.asarray(teacher_q, dtype=np.float64))
    if sq.shape != tq.shape:
        raise ValueError("student and teacher Q must cover the same actions")
    p_t = softmax(tq, temperature)
    z = sq / temperature
    log_p = z - z.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    ce = float(np.mean(-(p_t * log_p).sum(axis=1)))
    log_pt = np.log(np.clip(p_t, 1e-300, None))
    kl = float(np.mean((p_t * (log_pt - log_p)).sum(axis=1)))
    if not np.isfinite(ce):
        raise TrainingDivergedError("non-finite distillation loss")
    grad = lam_value * (np.exp(log_p) - p_t) / (temperature * sq.shape[0])
    return DistillationTerm(loss=lam_value * ce, cross_entropy=ce, kl=kl, grad=grad)


# ---------------------------------------------------------------------------
# oracle fixed-point residuals


def _w_step_kernel(spec: MdpSpec, policy: np.ndarray, gamma: float, w: int):
    """Expected in-group discounted reward and the state distribution w steps after (s, a)."""
    S, A = spec.num_states, spec.num_actions
    p_pi = np.einsum("sa,sat->st", policy, spec.transition)
    r_pi = (policy * spec.reward).sum(axis=1)
    reward = spec.reward.copy()
    dist = spec.transition.reshape(S * A, S)
    for j in range(1, w):
        reward += gamma**j * (dist @ r_pi).reshape(S, A)
        dist = dist @ p_pi
    return reward, dist.reshape(S, A, S)


def trd_bellman_residual(vectors: np.ndarray, spec: MdpSpec, policy: np.ndarray, gamma: float, w: int) -> float:
    """Sup-norm gap between a (S, A, n+1) table and its expected shift-and-merge target.

    Intermediate in-group actions follow ``policy``; the bootstrap action is
    greedy on the table, as in the learner.
    """
    n = vectors.shape[-1] - 1
    reward, dist = _w_step_kernel(spec, policy, gamma, w)
    greedy = np.argmax(vectors.sum(axis=-1), axis=1)
    pn = vectors[np.arange(spec.num_states), greedy]
    pn = np.where(spec.terminal[:, None], 0.0, pn)
    exp_next = np.einsum("sat,tk->sak", dist, pn)
    tgt = np.empty_like(vectors)
    tgt[..., 0] = reward
    tgt[..., 1:n] = gamma**w * exp_next[..., : n - 1]
    tgt[..., n] = gamma**w * (exp_next[..., n - 1] + exp_next[..., n])
    live = ~spec.terminal
    return float(np.max(np.abs(tgt[live] - vectors[live])))


def dqn_bellman_residual(q: np.ndarray, spec: MdpSpec, gamma: float) -> float:
    tgt = spec.reward + gamma * spec.transition @ np.where(spec.terminal, 0.0, q.max(axis=1))
    live = ~spec.terminal
    return float(np.max(np.abs(tgt[live] - q[live])))


# ---------------------------------------------------------------------------
# acting and evaluation


def _obs_for(est, obs, states):
    return states if isinstance(est, TabularTrd) else obs


def _greedy(est, spec: MdpSpec, state: int) -> int:
    x = np.asarray(state) if isinstance(est, TabularTrd) else spec.observation(state)[None]
    if isinstance(est, QNetwork):
        q = est.q_values(x)[0]
    else:
        q = scalar_q(est, x[None] if x.ndim == 0 else x)
        q = q[0] if q.ndim > 1 else q
    return int(np.argmax(q))


def epsilon_greedy(est, spec: MdpSpec, state: int, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(spec.num_actions))
    return _greedy(est, spec, state)


@dataclass
class EvalResult:
    mean_return: float
    returns: list[float]


def evaluate(est, spec: MdpSpec, seeds=tuple(range(10)), epsilon: float = 0.01) -> EvalResult:
    """One undiscounted episode per seed with epsilon-greedy actions."""
    returns = []
    for seed in seeds:
        rng = substream(seed, "eval")
        env, _ = envs.reset(spec, seed)
        total = 0.0
        while not env.done:
            a = epsilon_greedy(est, spec, env.current_state, epsilon, rng)
            _, r, _ = envs.step(env, a)
            total += r
        returns.append(total)
    return EvalResult(float(np.mean(returns)), returns)


def _epsilon_at(step: int, total: int, cfg: TrainConfig) -> float:
    horizon = max(1, int(cfg.exploration_fraction * total))
    frac = min(1.0, step / horizon)
    return cfg.epsilon_start + frac * (cfg.epsilon - cfg.epsilon_start)


def _check_loss(loss: float, step: int, phase: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at {phase} update {step}")


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherResult:
    net: QNetwork
    buffer: ReplayBuffer
    trace: list[dict]
    mean_return: float


def train_teacher(spec: MdpSpec, cfg: TrainConfig) -> TeacherResult:
    """Single-step DQN with a linearly decayed epsilon, replay and a hard-synced target network."""
    net = QNetwork(spec.obs_dim, spec.num_actions, cfg.gamma, hidden=cfg.hidden,
                   seed=substream_seed(cfg.seed, "teacher-init"))
    target = net.copy()
    opt = Adam(lr=cfg.learning_rate)
    rng = substream(cfg.seed, "teacher-collect")
    sample_rng = substream(cfg.seed, "teacher-sample")
    buf = ReplayBuffer(cfg.buffer_capacity, spec.obs_dim, w=1, gamma=cfg.gamma)
    acc = NStepAccumulator(1, cfg.gamma)
    episode = 0
    env, obs = envs.reset(spec, substream_seed(cfg.seed, f"episode-{episode}"))
    trace: list[dict] = []
    updates = 0
    losses: list[float] = []
    for t in range(1, cfg.teacher_steps + 1):
        s = env.current_state
        a = epsilon_greedy(net, spec, s, _epsilon_at(t, cfg.teacher_steps, cfg), rng)
        next_obs, r, term = envs.step(env, a)
        buf.extend(acc.push(obs, s, a, r, next_obs, env.current_state, term, env.truncated))
        obs = next_obs
        if env.done:
            episode += 1
            acc.reset()
            env, obs = envs.reset(spec, substream_seed(cfg.seed, f"episode-{episode}"))
        if t >= cfg.learning_starts and t % cfg.train_frequency == 0 and len(buf) >= cfg.batch_size:
            batch = buf.sample(cfg.batch_size, sample_rng)
            y = dqn_target(batch, target, cfg.gamma)
            out, cache = net.net.forward(batch.obs, keep=True)
            idx = np.arange(len(batch))
            diff = out[idx, batch.action] - y
            loss = float(np.mean(diff**2))
            _check_loss(loss, updates, "teacher")
            up = np.zeros_like(out)
            up[idx, batch.action] = 2.0 * diff / len(batch)
            apply_update(net, net.net.backward(up, cache), opt)
            losses.append(loss)
            updates += 1
            if updates % cfg.target_update == 0:
                target = net.copy()
        if t % cfg.teacher_eval_period == 0 or t == cfg.teacher_steps:
            ev = evaluate(net, spec, cfg.eval_seeds, cfg.epsilon)
            trace.append({"step": t, "mean_return": ev.mean_return,
                          "loss": float(np.mean(losses[-100:])) if losses else float("nan")})
    final = evaluate(net, spec, cfg.eval_seeds, cfg.epsilon)
    return TeacherResult(net=net, buffer=buf, trace=trace, mean_return=final.mean_return)


# ---------------------------------------------------------------------------
# reward-vector learners


def _buffer_states(spec: MdpSpec, buffer: ReplayBuffer | None) -> np.ndarray:
    if buffer is not None and len(buffer):
        states = np.unique(buffer.state[: len(buffer)])
        return states[~spec.terminal[states]]
    return spec.reachable_states()


def q_mse(student, teacher, spec: MdpSpec, states: np.ndarray) -> float:
    """Mean squared gap between student summed vectors and teacher scalar Q over ``states``."""
    obs = spec.observations()[states]
    sq = scalar_q(student, states if isinstance(student, TabularTrd) else obs)
    if isinstance(teacher, QNetwork):
        tq = teacher.q_values(obs)
    elif isinstance(teacher, np.ndarray):
        tq = teacher[states]
    else:
        tq = scalar_q(teacher, obs)
    return float(np.mean((sq - tq) ** 2))


@dataclass
class TrdResult:
    estimator: NeuralTrd
    curves: list[dict] = field(default_factory=list)
    teacher_return: float | None = None


CURVE_COLUMNS = ("phase", "step", "mean_return", "normalized_return", "q_mse", "lambda", "loss")


class _TrdUpdater:
    def __init__(self, student: NeuralTrd, cfg: TrainConfig, teacher: QNetwork | None, loss_kind: str):
        self.student = student
        self.target = student.copy()
        self.opt = Adam(lr=cfg.learning_rate)
        self.cfg = cfg
        self.teacher = teacher
        self.loss_kind = loss_kind
        self.updates = 0
        self.losses: list[float] = []

    def update(self, batch: Batch, lam: float) -> float:
        cfg, est = self.cfg, self.student
        idx = np.arange(len(batch))
        if self.loss_kind == "trd":
            tgt = trd_target(batch, self.target, cfg.gamma, cfg.w)
        else:
            tgt = dqn_target(batch, self.target, cfg.gamma, cfg.w)
        out = est.predict(batch.obs)
        pred = out[idx, batch.action]
        if self.loss_kind == "trd":
            loss, g = trd_loss(pred, tgt)
        else:
            loss, g = summed_loss(pred, tgt)
        up = np.zeros_like(out)
        up[idx, batch.action] = g
        if self.teacher is not None and lam > 0.0:
            tq = batch.teacher_q if batch.teacher_q is not None else self.teacher.q_values(batch.obs)
            dist = qdagger_loss(out.sum(axis=-1), tq, cfg.qdagger_temperature, lam)
            loss += dist.loss
            up += dist.grad[:, :, None]
        _check_loss(loss, self.updates, "trd")
        _, grads = est.forward_backward(batch.obs, up)
        apply_update(est, grads, self.opt)
        self.updates += 1
        self.losses.append(loss)
        if self.updates % cfg.target_update == 0:
            self.target = est.copy()
        return loss

    def recent_loss(self) -> float:
        return float(np.mean(self.losses[-100:])) if self.losses else float("nan")


def train_neural_trd(
    spec: MdpSpec,
    cfg: TrainConfig,
    teacher: QNetwork | None = None,
    teacher_buffer: ReplayBuffer | None = None,
    loss_kind: str = "trd",
) -> TrdResult:
    """Train a reward-vector network.

    With a teacher this is the two-stage retraining workflow: an offline
    stage on the teacher's buffer, then online collection with a constant
    epsilon, with the distillation term weighted by lambda throughout.
    Without a teacher it is plain online training with a decayed epsilon.
    ``loss_kind="summed"`` trains on the summed vector with a scalar target
    instead of the element-wise loss.
    """
    if loss_kind not in ("trd", "summed"):
        raise ValueError("loss_kind must be 'trd' or 'summed'")
    student = NeuralTrd(spec.obs_dim, spec.num_actions, cfg.n, cfg.w, cfg.gamma, hidden=cfg.hidden,
                        seed=substream_seed(cfg.seed, "init"))
    upd = _TrdUpdater(student, cfg, teacher, loss_kind)
    sample_rng = substream(cfg.seed, "sample")
    collect_rng = substream(cfg.seed, "collect")
    mse_states = _buffer_states(spec, teacher_buffer)
    result = TrdResult(estimator=student)

    teacher_return = None
    lam = LambdaSchedule(teacher_return=1.0, value=0.0)
    if teacher is not None:
        teacher_return = evaluate(teacher, spec, cfg.eval_seeds, cfg.epsilon).mean_return
        result.teacher_return = teacher_return
        lam = LambdaSchedule(teacher_return=teacher_return, value=1.0)

    def record(phase: str, step: int) -> None:
        nonlocal lam
        ev = evaluate(student, spec, cfg.eval_seeds, cfg.epsilon)
        row = {"phase": phase, "step": step, "mean_return": ev.mean_return,
               "normalized_return": float("nan"), "q_mse": float("nan"), "lambda": lam.value,
               "loss": upd.recent_loss()}
        if teacher is not None:
            row["normalized_return"] = ev.mean_return / teacher_return
            row["q_mse"] = q_mse(student, teacher, spec, mse_states)
            if step > 0:
                lam = update_lambda(lam, ev.mean_return, teacher_return)
            row["lambda"] = lam.value
        result.curves.append(row)
        log.info("%s step %d: return %.3f mse %.4g lambda %.3f", phase, step, ev.mean_return,
                 row["q_mse"], lam.value)

    offline_steps = cfg.offline_steps if teacher is not None else 0
    if offline_steps:
        if teacher_buffer is None or len(teacher_buffer) == 0:
            raise ValueError("offline stage needs a non-empty teacher buffer")
        offline = teacher_buffer.regroup(cfg.w, cfg.gamma) if cfg.w != 1 else teacher_buffer
        record("offline", 0)
        for k in range(1, offline_steps + 1):
            upd.update(offline.sample(cfg.batch_size, sample_rng), lam.value)
            if k % cfg.offline_eval_period == 0 or k == offline_steps:
                record("offline", k)
    else:
        record("online", 0)

    buf = ReplayBuffer(cfg.buffer_capacity, spec.obs_dim, w=cfg.w, gamma=cfg.gamma)
    acc = NStepAccumulator(cfg.w, cfg.gamma)
    episode = 0
    env, obs = envs.reset(spec, substream_seed(cfg.seed, f"online-episode-{episode}"))
    for t in range(1, cfg.online_steps + 1):
        eps = cfg.epsilon if teacher is not None else _epsilon_at(t, cfg.online_steps, cfg)
        s = env.current_state
        a = epsilon_greedy(student, spec, s, eps, collect_rng)
        next_obs, r, term = envs.step(env, a)
        buf.extend(acc.push(obs, s, a, r, next_obs, env.current_state, term, env.truncated))
        obs = next_obs
        if env.done:
            episode += 1
            acc.reset()
            env, obs = envs.reset(spec, substream_seed(cfg.seed, f"online-episode-{episode}"))
        if t >= cfg.learning_starts and t % cfg.train_frequency == 0 and len(buf) >= cfg.batch_size:
            upd.update(buf.sample(cfg.batch_size, sample_rng), lam.value)
        if t % cfg.online_eval_period == 0 or t == cfg.online_steps:
            record("online", offline_steps + t)
    return result


def retrain_trd(teacher: TeacherResult | QNetwork, spec: MdpSpec, cfg: TrainConfig,
                teacher_buffer: ReplayBuffer | None = None) -> TrdResult:
    if isinstance(teacher, TeacherResult):
        teacher_buffer = teacher_buffer or teacher.buffer
        teacher = teacher.net
    if teacher.obs_dim != spec.obs_dim or teacher.num_actions != spec.num_actions:
        raise ValueError("teacher network does not match the environment's observation/action sizes")
    return train_neural_trd(spec, cfg, teacher=teacher, teacher_buffer=teacher_buffer)


def train_tabular_trd(
    spec: MdpSpec,
    n: int,
    w: int,
    gamma: float,
    updates: int = 50_000,
    lr: float = 0.1,
    loss_kind: str = "trd",
    epsilon: float = 0.1,
    seed: int = 0,
) -> TabularTrd:
    """Online tabular learning from epsilon-greedy w-step experience.

    ``loss_kind="trd"`` moves each element toward its shift-and-merge target;
    ``"summed"`` applies the scalar error of the summed vector to every element.
    """
    if loss_kind not in ("trd", "summed"):
        raise ValueError("loss_kind must be 'trd' or 'summed'")
    est = TabularTrd.zeros(spec, n, w, gamma)
    rng = substream(seed, "collect")
    acc = NStepAccumulator(w, gamma)
    episode = 0
    env, _ = envs.reset(spec, substream_seed(seed, f"episode-{episode}"))
    done_updates = 0
    while done_updates < updates:
        s = env.current_state
        a = epsilon_greedy(est, spec, s, epsilon, rng)
        _, r, term = envs.step(env, a)
        recs = acc.push(None, s, a, r, None, env.current_state, term, env.truncated)
        for rec in recs:
            batch = Batch(obs=None, state=np.array([rec.state]), action=np.array([rec.action]),
                          reward=np.array([rec.grouped_reward]), next_obs=None,
                          next_state=np.array([rec.next_state]), terminated=np.array([float(rec.terminated)]))
            cur = est.table[rec.state, rec.action]
            if loss_kind == "trd":
                est.table[rec.state, rec.action] = cur + lr * (trd_target(batch, est, gamma, w)[0] - cur)
            else:
                y = dqn_target(batch, est, gamma, w)[0]
                est.table[rec.state, rec.action] = cur + lr * (y - cur.sum())
            done_updates += 1
            if done_updates >= updates:
                break
        if env.done:
            episode += 1
            acc.reset()
            env, _ = envs.reset(spec, substream_seed(seed, f"episode-{episode}"))
    return est


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
