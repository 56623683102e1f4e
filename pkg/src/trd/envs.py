"""Finite MDP definitions and a seeded step/reset simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

ROW_SUM_TOL = 1e-12
DEFAULT_MAX_STEPS = 200


class EpisodeOverError(RuntimeError):
    """Raised when stepping an episode that has already ended."""


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Immutable finite MDP.

    ``transition`` has shape (S, A, S) and ``reward`` shape (S, A); terminal
    states must self-loop with zero reward so every value quantity on them is
    exactly zero.  ``features`` optionally overrides the one-hot observation.
    """

    name: str
    transition: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray
    features: np.ndarray | None = None
    action_names: tuple[str, ...] = ()
    state_names: tuple[str, ...] = ()
    max_steps: int = DEFAULT_MAX_STEPS
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        P = np.asarray(self.transition, dtype=np.float64)
        R = np.asarray(self.reward, dtype=np.float64)
        term = np.asarray(self.terminal, dtype=bool)
        init = np.asarray(self.initial, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {R.shape}")
        if term.shape != (S,) or init.shape != (S,):
            raise ValueError("terminal and initial must have one entry per state")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("transition rows must be probability distributions")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if np.any(init < 0) or abs(init.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("initial distribution must sum to 1")
        for s in np.flatnonzero(term):
            if np.any(R[s] != 0.0) or np.any(P[s, :, s] != 1.0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")
        feats = None
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != S:
                raise ValueError("features must have shape (S, dim)")
            feats.setflags(write=False)
        for arr in (P, R, term, init):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "features", feats)
        if not self.action_names:
            object.__setattr__(self, "action_names", tuple(str(a) for a in range(A)))
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(str(s) for s in range(S)))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.num_states if self.features is None else self.features.shape[1]

    def observation(self, state: int) -> np.ndarray:
        if self.features is None:
            obs = np.zeros(self.num_states)
            obs[state] = 1.0
            return obs
        return self.features[state].copy()

    def observations(self) -> np.ndarray:
        """Observation matrix with one row per state."""
        if self.features is None:
            return np.eye(self.num_states)
        return self.features.copy()

    @property
    def binary_reward_value(self) -> float | None:
        """The constant ``c`` if every reward is 0 or ``c``, else None."""
        nonzero = np.unique(self.reward[self.reward != 0.0])
        if len(nonzero) == 1:
            return float(nonzero[0])
        return None

    def action_index(self, action: int | str) -> int:
        if isinstance(action, str) and not action.lstrip("-").isdigit():
            try:
                return self.action_names.index(action)
            except ValueError:
                raise ValueError(f"unknown action {action!r} for {self.name}") from None
        a = int(action)
        if not 0 <= a < self.num_actions:
            raise ValueError(f"action {a} out of range for {self.name}")
        return a

    def state_index(self, state: int | str) -> int:
        if isinstance(state, str) and not state.lstrip("-").isdigit():
            try:
                return self.state_names.index(state)
            except ValueError:
                raise ValueError(f"unknown state {state!r} for {self.name}") from None
        s = int(state)
        if not 0 <= s < self.num_states:
            raise ValueError(f"state {s} out of range for {self.name}")
        return s

    def reachable_states(self) -> np.ndarray:
        """Non-terminal states reachable from the initial distribution under any actions."""
        seen = set(np.flatnonzero(self.initial > 0).tolist())
        frontier = list(seen)
        while frontier:
            s = frontier.pop()
            for nxt in np.flatnonzero(self.transition[s].sum(axis=0) > 0):
                if int(nxt) not in seen:
                    seen.add(int(nxt))
                    frontier.append(int(nxt))
        return np.array(sorted(s for s in seen if not self.terminal[s]), dtype=int)


@dataclass
class EnvState:
    spec: MdpSpec
    current_state: int
    elapsed_steps: int
    rng: np.random.Generator = field(compare=False, repr=False)
    terminated: bool = False
    truncated: bool = False

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


def reset(spec: MdpSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    s = int(rng.choice(spec.num_states, p=spec.initial))
    env = EnvState(spec=spec, current_state=s, elapsed_steps=0, rng=rng)
    return env, spec.observation(s)


def step(env: EnvState, action: int) -> tuple[np.ndarray, float, bool]:
    """Advance one step; returns (observation, reward, terminated).

    Hitting ``spec.max_steps`` sets ``env.truncated`` without reporting termination.
    """
    if env.done:
        raise EpisodeOverError(
            f"episode already ended at step {env.elapsed_steps} "
            f"({'terminated' if env.terminated else 'truncated'})"
        )
    spec = env.spec
    a = int(action)
    if not 0 <= a < spec.num_actions:
        raise ValueError(f"invalid action {action} for {spec.name}")
    s = env.current_state
    reward = float(spec.reward[s, a])
    nxt = int(env.rng.choice(spec.num_states, p=spec.transition[s, a]))
    env.current_state = nxt
    env.elapsed_steps += 1
    env.terminated = bool(spec.terminal[nxt])
    env.truncated = not env.terminated and env.elapsed_steps >= spec.max_steps
    return spec.observation(nxt), reward, env.terminated


# ---------------------------------------------------------------------------
# environment constructors


def make_gridworld_two_paths(max_steps: int = DEFAULT_MAX_STEPS) -> MdpSpec:
    """Junction with an up corridor (chest worth 4 on the fifth move) and a
    down corridor (a coin on each of moves two to five).

    States: 0 junction, 1-4 up corridor, 5-8 down corridor, 9 terminal.
    Outside the junction both actions move forward.
    """
    S, A = 10, 2
    UP, DOWN = 0, 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    P[0, UP, 1] = 1.0
    P[0, DOWN, 5] = 1.0
    for s in (1, 2, 3, 5, 6, 7):
        P[s, :, s + 1] = 1.0
    P[4, :, 9] = 1.0
    P[8, :, 9] = 1.0
    R[4, :] = 4.0
    R[5:9, :] = 1.0
    P[9, :, 9] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[9] = True
    initial = np.zeros(S)
    initial[0] = 1.0
    names = ("junction", "up1", "up2", "up3", "up4", "down1", "down2", "down3", "down4", "end")
    return MdpSpec(
        name="gridworld_two_paths",
        transition=P,
        reward=R,
        terminal=terminal,
        initial=initial,
        action_names=("up", "down"),
        state_names=names,
        max_steps=max_steps,
    )


def make_periodic_chain(
    period: int = 3,
    slip_prob: float = 0.0,
    num_cycles: int = 4,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> MdpSpec:
    """Chain emitting a unit reward on every ``period``-th advance.

    Action 0 advances, action 1 quits straight to the terminal state with no
    reward.  An advance from a non-rewarding position stalls with probability
    ``slip_prob``; the rewarding advance never stalls, so each cycle pays
    exactly once and the uncertainty is only in *when*.
    """
    if period < 2:
        raise ValueError("period must be >= 2")
    if not 0.0 <= slip_prob < 1.0:
        raise ValueError("slip_prob must be in [0, 1)")
    if num_cycles < 1:
        raise ValueError("num_cycles must be >= 1")
    L = period * num_cycles
    S, A = L + 1, 2
    ADVANCE, QUIT = 0, 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for i in range(L):
        if i % period == period - 1:
            P[i, ADVANCE, i + 1] = 1.0
            R[i, ADVANCE] = 1.0
        else:
            P[i, ADVANCE, i + 1] = 1.0 - slip_prob
            P[i, ADVANCE, i] += slip_prob
        P[i, QUIT, L] = 1.0
    P[L, :, L] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[L] = True
    initial = np.zeros(S)
    initial[0] = 1.0
    return MdpSpec(
        name="periodic_chain",
        transition=P,
        reward=R,
        terminal=terminal,
        initial=initial,
        action_names=("advance", "quit"),
        state_names=tuple(f"pos{i}" for i in range(L)) + ("end",),
        max_steps=max_steps,
        params={"period": period, "slip_prob": slip_prob, "num_cycles": num_cycles},
    )


def feature_split_state(a_flag: int, b_flag: int) -> int:
    """Index of the start state with feature A = ``a_flag`` and B = ``b_flag``."""
    return 2 * int(a_flag) + int(b_flag)


def make_feature_split_env(delay: int = 6, max_steps: int = DEFAULT_MAX_STEPS) -> MdpSpec:
    """Two independent binary features drive rewards at different horizons.

    An episode starts in one of four states (A, B) in {0,1}^2.  Action 0
    ("collect") pays A immediately, action 1 ("skip") pays nothing.  Either
    way the agent then walks a forced corridor of ``delay`` cells carrying B,
    and leaving the last cell pays B, i.e. at ``delay`` steps after the start.

    Observation layout: [A, B, position one-hot (0..delay), terminal flag].
    """
    if delay < 1:
        raise ValueError("delay must be >= 1")
    d = delay
    n_start = 4
    S = n_start + 2 * d + 1
    T = S - 1
    A = 2

    def corridor(b: int, p: int) -> int:
        # corridor cell p in 1..d for flag b
        return n_start + b * d + (p - 1)

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    feats = np.zeros((S, 2 + (d + 1) + 1))
    names = []
    for a_flag in (0, 1):
        for b_flag in (0, 1):
            s = feature_split_state(a_flag, b_flag)
            P[s, :, corridor(b_flag, 1)] = 1.0
            R[s, 0] = float(a_flag)
            feats[s, 0] = a_flag
            feats[s, 1] = b_flag
            feats[s, 2] = 1.0
    names = [f"start_A{s // 2}_B{s % 2}" for s in range(n_start)]
    for b_flag in (0, 1):
        for p in range(1, d + 1):
            s = corridor(b_flag, p)
            if p == d:
                P[s, :, T] = 1.0
                R[s, :] = float(b_flag)
            else:
                P[s, :, corridor(b_flag, p + 1)] = 1.0
            feats[s, 1] = b_flag
            feats[s, 2 + p] = 1.0
            names.append(f"corridor_B{b_flag}_{p}")
    names.append("end")
    P[T, :, T] = 1.0
    feats[T, -1] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[T] = True
    initial = np.zeros(S)
    initial[:n_start] = 0.25
    return MdpSpec(
        name="feature_split",
        transition=P,
        reward=R,
        terminal=terminal,
        initial=initial,
        features=feats,
        action_names=("collect", "skip"),
        state_names=tuple(names),
        max_steps=max_steps,
        params={"delay": d},
    )


FEATURE_GROUP_A = np.array([0])
FEATURE_GROUP_B = np.array([1])

ENV_KINDS = {
    "gridworld_two_paths": make_gridworld_two_paths,
    "periodic_chain": make_periodic_chain,
    "feature_split": make_feature_split_env,
}


def make_env(kind: str, **params: Any) -> MdpSpec:
    try:
        factory = ENV_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown env kind {kind!r}; expected one of {sorted(ENV_KINDS)}") from None
    return factory(**params)
