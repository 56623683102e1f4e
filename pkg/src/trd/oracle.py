"""Exact dynamic-programming values on finite MDPs, plus a Monte-Carlo estimator.

Everything learned elsewhere in the package is checked against these.
Policies are plain (S, A) row-stochastic arrays.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import MdpSpec

RESIDUAL_TOL = 1e-10
MAX_ITERATIONS = 100_000


class ConvergenceError(RuntimeError):
    pass


def deterministic_policy(actions, num_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((len(actions), num_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def uniform_policy(spec: MdpSpec) -> np.ndarray:
    return np.full((spec.num_states, spec.num_actions), 1.0 / spec.num_actions)


def _check(spec: MdpSpec, policy: np.ndarray | None, gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    if policy is not None:
        if policy.shape != (spec.num_states, spec.num_actions):
            raise ValueError(f"policy shape {policy.shape} does not match spec")
        if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1")


@dataclass
class ValueTable:
    """Reward vectors per (state, action) for ``form == "q"`` or per state for ``"v"``.

    Element ``i < n`` is the discounted reward mass of timesteps
    ``i*w .. (i+1)*w - 1``; element ``n`` is everything from ``n*w`` on.
    """

    vectors: np.ndarray
    n: int
    w: int
    gamma: float
    form: str = "q"

    @property
    def scalar(self) -> np.ndarray:
        return self.vectors.sum(axis=-1)

    def to_csv(self, path: str | Path, state_names=None, action_names=None) -> Path:
        path = Path(path)
        header = ["state", "action"] + [f"element_{i}" for i in range(self.n + 1)] + ["scalar_sum"]
        vecs = self.vectors if self.form == "q" else self.vectors[:, None, :]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for s in range(vecs.shape[0]):
                for a in range(vecs.shape[1]):
                    v = vecs[s, a]
                    s_label = state_names[s] if state_names else s
                    if self.form == "v":
                        a_label = ""
                    else:
                        a_label = action_names[a] if action_names else a
                    writer.writerow([s_label, a_label] + [repr(float(x)) for x in v] + [repr(float(v.sum()))])
        return path


def _policy_backup(spec: MdpSpec, policy: np.ndarray, gamma: float, q: np.ndarray) -> np.ndarray:
    v = (policy * q).sum(axis=1)
    return spec.reward + gamma * spec.transition @ v


def exact_q(spec: MdpSpec, policy: np.ndarray, gamma: float, max_iterations: int = MAX_ITERATIONS) -> np.ndarray:
    """Policy evaluation by iterated backups until the sup-norm change is below 1e-10."""
    _check(spec, policy, gamma)
    q = np.zeros((spec.num_states, spec.num_actions))
    for _ in range(max_iterations):
        q_new = _policy_backup(spec, policy, gamma, q)
        if np.max(np.abs(q_new - q)) < RESIDUAL_TOL:
            return q_new
        q = q_new
    raise ConvergenceError(f"policy evaluation did not converge in {max_iterations} iterations")


def exact_v(spec: MdpSpec, policy: np.ndarray, gamma: float, max_iterations: int = MAX_ITERATIONS) -> np.ndarray:
    q = exact_q(spec, policy, gamma, max_iterations)
    return (policy * q).sum(axis=1)


def optimal_q(spec: MdpSpec, gamma: float, max_iterations: int = MAX_ITERATIONS) -> np.ndarray:
    _check(spec, None, gamma)
    q = np.zeros((spec.num_states, spec.num_actions))
    for _ in range(max_iterations):
        q_new = spec.reward + gamma * spec.transition @ q.max(axis=1)
        if np.max(np.abs(q_new - q)) < RESIDUAL_TOL:
            return q_new
        q = q_new
    raise ConvergenceError(f"value iteration did not converge in {max_iterations} iterations")


def optimal_policy(spec: MdpSpec, gamma: float, max_iterations: int = MAX_ITERATIONS) -> np.ndarray:
    """Greedy policy of the optimal Q; ties go to the lowest action index."""
    q = optimal_q(spec, gamma, max_iterations)
    return deterministic_policy(np.argmax(q, axis=1), spec.num_actions)


def expected_reward_sequence(spec: MdpSpec, policy: np.ndarray, horizon: int) -> np.ndarray:
    """Undiscounted E[R_{t+k} | s, a] for k = 0..horizon-1, shape (S, A, horizon).

    Forward recursion on the distribution over states k steps ahead.
    """
    S, A = spec.num_states, spec.num_actions
    out = np.zeros((S, A, horizon))
    if horizon == 0:
        return out
    out[:, :, 0] = spec.reward
    r_pi = (policy * spec.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, spec.transition)
    dist = spec.transition.reshape(S * A, S)
    for k in range(1, horizon):
        out[:, :, k] = (dist @ r_pi).reshape(S, A)
        dist = dist @ p_pi
    return out


def group_rewards(per_step: np.ndarray, gamma: float, n: int, w: int) -> np.ndarray:
    """Discount and sum a (..., n*w) array of per-step expected rewards into n groups."""
    disc = gamma ** np.arange(n * w)
    return (per_step[..., : n * w] * disc).reshape(per_step.shape[:-1] + (n, w)).sum(axis=-1)


def aggregate_vector(vectors: np.ndarray, w: int) -> np.ndarray:
    """Merge width-1 reward vectors (length N1+1) into width-``w`` groups.

    The head length must be a multiple of ``w``; any leftover is folded into the tail.
    """
    head, tail = vectors[..., :-1], vectors[..., -1:]
    n = head.shape[-1] // w
    grouped = head[..., : n * w].reshape(head.shape[:-1] + (n, w)).sum(axis=-1)
    rest = head[..., n * w :].sum(axis=-1, keepdims=True) + tail
    return np.concatenate([grouped, rest], axis=-1)


def exact_trd_q(spec: MdpSpec, policy: np.ndarray, gamma: float, n: int, w: int = 1) -> ValueTable:
    if n < 1 or w < 1:
        raise ValueError("n and w must be >= 1")
    q = exact_q(spec, policy, gamma)
    per_step = expected_reward_sequence(spec, policy, n * w)
    head = group_rewards(per_step, gamma, n, w)
    tail = q - head.sum(axis=-1)
    vectors = np.concatenate([head, tail[..., None]], axis=-1)
    return ValueTable(vectors=vectors, n=n, w=w, gamma=gamma, form="q")


def exact_trd_v(spec: MdpSpec, policy: np.ndarray, gamma: float, n: int, w: int = 1) -> ValueTable:
    qt = exact_trd_q(spec, policy, gamma, n, w)
    vectors = np.einsum("sa,sak->sk", policy, qt.vectors)
    return ValueTable(vectors=vectors, n=n, w=w, gamma=gamma, form="v")


@dataclass
class MonteCarloEstimate:
    vectors: np.ndarray  # (S, A, n+1): sum over episodes of grouped discounted rewards / episodes
    mean_return: np.ndarray  # (S, A): mean discounted return over the same episodes
    stderr: np.ndarray  # (S, A, n+1)
    episodes: int
    n: int
    w: int
    gamma: float

    def as_table(self) -> ValueTable:
        return ValueTable(vectors=self.vectors, n=self.n, w=self.w, gamma=self.gamma)


def _default_horizon(gamma: float, spec: MdpSpec) -> int:
    if gamma == 0.0:
        return 1
    return max(1, min(10_000, math.ceil(math.log(1e-12) / math.log(gamma))))


def _simulate_shard(spec, policy, gamma, n, w, episodes, horizon, seed_seq):
    """Sums of grouped rewards, their squares and of returns over ``episodes`` per (s, a)."""
    rng = np.random.default_rng(seed_seq)
    S, A = spec.num_states, spec.num_actions
    P_cum = np.cumsum(spec.transition, axis=2)
    pi_cum = np.cumsum(policy, axis=1)
    sums = np.zeros((S, A, n + 1))
    sq = np.zeros((S, A, n + 1))
    ret = np.zeros((S, A))
    ret_sq = np.zeros((S, A))
    for s0 in range(S):
        for a0 in range(A):
            state = np.full(episodes, s0)
            action = np.full(episodes, a0)
            elems = np.zeros((episodes, n + 1))
            returns = np.zeros(episodes)
            alive = ~spec.terminal[state]
            for t in range(horizon):
                if not alive.any():
                    break
                r = np.where(alive, spec.reward[state, action], 0.0) * gamma**t
                elems[:, min(t // w, n)] += r
                returns += r
                u = rng.random(episodes)
                nxt = (u[:, None] > P_cum[state, action]).sum(axis=1)
                state = np.minimum(nxt, S - 1)
                alive &= ~spec.terminal[state]
                u = rng.random(episodes)
                action = np.minimum((u[:, None] > pi_cum[state]).sum(axis=1), A - 1)
            sums[s0, a0] = elems.sum(axis=0)
            sq[s0, a0] = (elems**2).sum(axis=0)
            ret[s0, a0] = returns.sum()
            ret_sq[s0, a0] = (returns**2).sum()
    return sums, sq, ret, ret_sq


def mc_trd_estimate(
    spec: MdpSpec,
    policy: np.ndarray,
    gamma: float,
    n: int,
    w: int,
    episodes: int,
    seed: int,
    horizon: int | None = None,
    shards: int = 1,
    workers: int = 1,
) -> MonteCarloEstimate:
    """Monte-Carlo reward vectors from rollouts started at every (s, a).

    Episodes run until termination or ``horizon`` steps (default: until
    gamma**t < 1e-12).  Shards use independent spawned seed streams and are
    reduced by summation, so results do not depend on ``workers``.
    """
    _check(spec, policy, gamma)
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    horizon = horizon or _default_horizon(gamma, spec)
    shards = max(1, min(shards, episodes))
    counts = [episodes // shards + (i < episodes % shards) for i in range(shards)]
    seeds = np.random.SeedSequence(seed).spawn(shards)
    jobs = [(spec, policy, gamma, n, w, c, horizon, ss) for c, ss in zip(counts, seeds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _simulate_shard(*j), jobs))
    else:
        parts = [_simulate_shard(*j) for j in jobs]
    sums, sq, ret, _ = (sum(p[i] for p in parts) for i in range(4))
    mean = sums / episodes
    var = np.maximum(sq / episodes - mean**2, 0.0)
    stderr = np.sqrt(var / episodes)
    return MonteCarloEstimate(
        vectors=mean, mean_return=ret / episodes, stderr=stderr, episodes=episodes, n=n, w=w, gamma=gamma
    )
