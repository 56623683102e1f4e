"""Explanations built on reward vectors: timelines, per-element saliency and action contrasts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimators import NeuralTrd, TabularTrd, greedy_action, predict_vector

log = logging.getLogger(__name__)


class ExplanationError(ValueError):
    pass


@dataclass
class Timeline:
    """Per-group expected reward with the leading discount gamma**(i*w) divided out.

    For ``kind == "confidence"`` the values are probabilities of receiving
    the environment's single non-zero reward in that step.
    """

    values: list[float]
    group_width: int
    kind: str
    gamma: float
    state: int | str | None = None
    action: int | None = None
    tail: float = 0.0
    clipped: float = 0.0
    discount_note: str = "each group divided by gamma**(i*w), its leading discount"

    @property
    def horizon(self) -> int:
        return len(self.values) * self.group_width

    def timesteps(self) -> list[int]:
        return [i * self.group_width for i in range(len(self.values))]


@dataclass
class SaliencyMap:
    element: int | str
    action: int | None
    importance: list[float]
    raw: list[float] = field(default_factory=list)
    input_gradient: list[float] = field(default_factory=list)
    normalization: str = "max-abs"


@dataclass
class ContrastResult:
    action_a: int
    action_b: int
    reward_a: list[float]
    reward_b: list[float]
    diff: list[float]
    scalar_diff: float
    timeline_a: list[float] = field(default_factory=list)
    timeline_b: list[float] = field(default_factory=list)
    state: int | str | None = None


def _single(est, obs):
    vec = predict_vector(est, obs)
    if vec.ndim != 2:
        raise ExplanationError("explanations take a single observation")
    return vec


def _undiscount(head: np.ndarray, gamma: float, w: int) -> np.ndarray:
    if gamma == 0.0 and len(head) > 1:
        raise ExplanationError("cannot factor out a zero discount beyond the first group")
    return head / gamma ** (np.arange(len(head)) * w)


def reward_timeline(est, obs, action: int | None = None, state=None) -> Timeline:
    vec = _single(est, obs)
    if action is None:
        action = greedy_action(est, obs)
    v = vec[int(action)]
    values = _undiscount(v[:-1], est.gamma, est.w)
    return Timeline(values=[float(x) for x in values], group_width=est.w, kind="expected_reward",
                    gamma=est.gamma, state=state, action=int(action), tail=float(v[-1]))


def confidence_timeline(est, obs, reward_value: float | None, action: int | None = None, state=None) -> Timeline:
    """Expected-reward timeline rescaled by the binary reward value and clipped to [0, 1].

    ``reward_value`` is ``MdpSpec.binary_reward_value``; None (a non-binary
    environment) is refused, as is grouping (w > 1).
    """
    if reward_value is None or reward_value == 0:
        raise ExplanationError("confidence timelines need an environment whose rewards are 0 or one constant")
    if est.w != 1:
        raise ExplanationError("confidence timelines need w == 1")
    tl = reward_timeline(est, obs, action, state)
    probs = np.asarray(tl.values) / reward_value
    clipped = np.clip(probs, 0.0, 1.0)
    amount = float(np.abs(probs - clipped).sum())
    if amount > 0:
        log.warning("confidence timeline clipped by a total of %.3g", amount)
    tl.values = [float(x) for x in clipped]
    tl.kind = "confidence"
    tl.clipped = amount
    return tl


def element_saliency(est, obs, element: int, action: int | None = None, steps: int = 64) -> SaliencyMap:
    """Input-feature importance for one reward-vector element.

    The gradient of the chosen output at each first-hidden-layer unit is
    averaged over ``steps`` points on the straight path from the zero
    observation to ``obs``; each unit's averaged gradient is carried back to
    the inputs through the first-layer weights and multiplied by the input
    value.  Importances therefore sum to f(obs) - f(0).
    """
    if isinstance(est, TabularTrd) or not isinstance(est, NeuralTrd):
        raise ExplanationError("saliency needs a neural estimator")
    if not 0 <= element <= est.n:
        raise ExplanationError(f"element must be in [0, {est.n}]")
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    if action is None:
        action = greedy_action(est, x)
    alphas = (np.arange(steps) + 0.5) / steps
    path = alphas[:, None] * x[None, :]
    upstream = np.zeros((steps, est.num_actions, est.n + 1))
    upstream[:, int(action), element] = 1.0
    _, grads = est.forward_backward(path, upstream)
    unit_grad = grads.biases[0] / steps  # mean gradient at the first hidden pre-activations
    per_unit = x[:, None] * est.net.weights[0] * unit_grad[None, :]
    raw = per_unit.sum(axis=1)
    return SaliencyMap(element=int(element), action=int(action), importance=_normalize(raw),
                       raw=[float(v) for v in raw],
                       input_gradient=[float(v) for v in grads.inputs.mean(axis=0)])


def _normalize(x: np.ndarray) -> list[float]:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    out = x / peak if peak > 0 else np.zeros_like(x)
    return [float(v) for v in out]


def saliency_diff(map_a: SaliencyMap, map_b: SaliencyMap) -> SaliencyMap:
    """``map_a - map_b`` on the normalized importances, renormalized."""
    a, b = np.asarray(map_a.importance), np.asarray(map_b.importance)
    if a.shape != b.shape:
        raise ExplanationError(f"saliency maps differ in size: {a.shape} vs {b.shape}")
    d = a - b
    return SaliencyMap(element=f"{map_a.element}-{map_b.element}", action=map_a.action,
                       importance=_normalize(d), raw=[float(v) for v in d])


def contrast_actions(est, obs, action_a: int, action_b: int, state=None) -> ContrastResult:
    vec = _single(est, obs)
    for a in (action_a, action_b):
        if not 0 <= a < vec.shape[0]:
            raise ExplanationError(f"action {a} out of range")
    va, vb = vec[action_a], vec[action_b]
    diff = va - vb
    return ContrastResult(
        action_a=int(action_a), action_b=int(action_b),
        reward_a=[float(x) for x in va], reward_b=[float(x) for x in vb], diff=[float(x) for x in diff],
        scalar_diff=float(va.sum() - vb.sum()),
        timeline_a=[float(x) for x in _undiscount(va[:-1], est.gamma, est.w)],
        timeline_b=[float(x) for x in _undiscount(vb[:-1], est.gamma, est.w)],
        state=state,
    )


# ---------------------------------------------------------------------------
# export

ARTIFACT_TYPES = {"timeline": Timeline, "saliency": SaliencyMap, "contrast": ContrastResult}


def artifact_type(artifact) -> str:
    for name, cls in ARTIFACT_TYPES.items():
        if isinstance(artifact, cls):
            return name
    raise TypeError(f"not an explanation artifact: {type(artifact).__name__}")


def csv_rows(artifact) -> tuple[list[str], list[list]]:
    kind = artifact_type(artifact)
    if kind == "timeline":
        header = ["timestep", "group_width", "value", "kind"]
        rows = [[t, artifact.group_width, repr(v), artifact.kind]
                for t, v in zip(artifact.timesteps(), artifact.values)]
    elif kind == "saliency":
        header = ["feature_index", "importance"]
        rows = [[i, repr(v)] for i, v in enumerate(artifact.importance)]
    else:
        header = ["element", "reward_a", "reward_b", "diff"]
        rows = [[i, repr(a), repr(b), repr(d)]
                for i, (a, b, d) in enumerate(zip(artifact.reward_a, artifact.reward_b, artifact.diff))]
    return header, rows


def to_dict(artifact) -> dict:
    return {"type": artifact_type(artifact), **asdict(artifact)}


def from_dict(data: dict):
    data = dict(data)
    cls = ARTIFACT_TYPES[data.pop("type")]
    return cls(**data)


def export_artifact(artifact, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``artifact`` as csv, json or svg (inferred from the suffix when ``fmt`` is None)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        if fmt == "csv":
            header, rows = csv_rows(artifact)
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
        elif fmt == "json":
            path.write_text(json.dumps(to_dict(artifact), indent=2) + "\n")
        elif fmt == "svg":
            from .plotting import render_artifact

            render_artifact(artifact, path)
        else:
            raise ValueError(f"unsupported format {fmt!r}; expected csv, json or svg")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc
    return path


def load_artifact(path: str | Path):
    return from_dict(json.loads(Path(path).read_text()))


def export_episode_timelines(timelines: list[Timeline], path: str | Path) -> Path:
    """One block of timeline rows per visited step; stands in for a per-frame video."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "state", "action", "timestep", "group_width", "value", "kind"])
        for step, tl in enumerate(timelines):
            for t, v in zip(tl.timesteps(), tl.values):
                writer.writerow([step, tl.state, tl.action, t, tl.group_width, repr(v), tl.kind])
    return path
