"""Reward-guided layer selection: EMA rewards, UCB utilities, softmax sampling.

The state is an immutable value; ``update`` returns a new state. Sampling is
a pure function of the state: the draw index is the global step, combined
with the state's seed, so a resumed checkpoint continues the same stream.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_RHO = 0.1
DEFAULT_BETA = 0.5
DEFAULT_TAU = 0.2


@dataclass(frozen=True)
class SchedulerState:
    layer_ids: tuple[int, ...]
    q: tuple[float, ...]
    counts: tuple[int, ...]
    last_loss: tuple[float | None, ...]
    step: int = 1
    rho: float = DEFAULT_RHO
    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    rng_seed: int = 0
    normalize_reward: bool = False

    def __post_init__(self) -> None:
        k = len(self.layer_ids)
        if len(set(self.layer_ids)) != k:
            raise ValueError(f"duplicate layer ids in {self.layer_ids}")
        if not (len(self.q) == len(self.counts) == len(self.last_loss) == k):
            raise ValueError("per-layer fields must match the number of layers")
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be nonnegative")
        if not all(math.isfinite(x) for x in self.q):
            raise ValueError("Q values must be finite")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    def index(self, layer: int) -> int:
        try:
            return self.layer_ids.index(layer)
        except ValueError:
            raise ValueError(f"layer {layer} is not a candidate ({self.layer_ids})") from None

    def to_dict(self) -> dict:
        return {
            "layer_ids": list(self.layer_ids),
            "q": list(self.q),
            "counts": list(self.counts),
            "last_loss": list(self.last_loss),
            "step": self.step,
            "rho": self.rho,
            "beta": self.beta,
            "tau": self.tau,
            "rng_seed": self.rng_seed,
            "normalize_reward": self.normalize_reward,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SchedulerState:
        return cls(
            layer_ids=tuple(int(x) for x in d["layer_ids"]),
            q=tuple(float(x) for x in d["q"]),
            counts=tuple(int(x) for x in d["counts"]),
            last_loss=tuple(None if x is None else float(x) for x in d["last_loss"]),
            step=int(d["step"]),
            rho=float(d["rho"]),
            beta=float(d["beta"]),
            tau=float(d["tau"]),
            rng_seed=int(d["rng_seed"]),
            normalize_reward=bool(d.get("normalize_reward", False)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SchedulerState:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_state(
    layer_ids: Sequence[int],
    rho: float = DEFAULT_RHO,
    beta: float = DEFAULT_BETA,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
    normalize_reward: bool = False,
) -> SchedulerState:
    """Cold-start state: Q = 0, n = 0, t = 1 for every candidate layer."""
    k = len(layer_ids)
    if k == 0:
        raise ValueError("candidate layer set is empty")
    return SchedulerState(
        layer_ids=tuple(int(x) for x in layer_ids),
        q=(0.0,) * k,
        counts=(0,) * k,
        last_loss=(None,) * k,
        rho=rho,
        beta=beta,
        tau=tau,
        rng_seed=seed,
        normalize_reward=normalize_reward,
    )


def compute_reward(prev_loss: float | None, curr_loss: float, normalize: bool = False) -> float:
    """Loss decrease since the layer's previous activation; 0 on the first one.

    With ``normalize`` the decrease is divided by ``|prev_loss|``.
    """
    if not math.isfinite(curr_loss):
        raise ValueError(f"current loss is not finite: {curr_loss}")
    if prev_loss is None:
        return 0.0
    if not math.isfinite(prev_loss):
        raise ValueError(f"previous loss is not finite: {prev_loss}")
    delta = prev_loss - curr_loss
    if normalize:
        return delta / abs(prev_loss) if prev_loss != 0 else 0.0
    return delta


def update(state: SchedulerState, layer: int, reward: float, loss: float | None = None) -> SchedulerState:
    """EMA update of the activated layer's reward; also advances the global step.

    ``loss`` (when given) is remembered as the layer's last-activation loss.
    """
    i = state.index(layer)
    q = list(state.q)
    q[i] = (1.0 - state.rho) * q[i] + state.rho * reward
    counts = list(state.counts)
    counts[i] += 1
    last = list(state.last_loss)
    if loss is not None:
        last[i] = float(loss)
    return replace(state, q=tuple(q), counts=tuple(counts), last_loss=tuple(last), step=state.step + 1)


def observe(state: SchedulerState, layer: int, loss: float) -> tuple[SchedulerState, float]:
    """Turn the loss seen at an activation into a reward and apply ``update``."""
    prev = state.last_loss[state.index(layer)]
    reward = compute_reward(prev, loss, state.normalize_reward)
    return update(state, layer, reward, loss), reward


def utilities(state: SchedulerState) -> np.ndarray:
    q = np.asarray(state.q, dtype=float)
    n = np.maximum(1, np.asarray(state.counts, dtype=float))
    return q + state.beta * np.sqrt(math.log(state.step) / n)


def sample_distribution(state: SchedulerState) -> np.ndarray:
    z = utilities(state) / state.tau
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def _rng(state: SchedulerState) -> np.random.Generator:
    return np.random.default_rng([state.rng_seed, state.step])


def select(state: SchedulerState) -> int:
    """Draw one layer from the softmax distribution."""
    if not state.layer_ids:
        raise ValueError("candidate layer set is empty")
    if len(state.layer_ids) == 1:
        return state.layer_ids[0]
    p = sample_distribution(state)
    i = int(_rng(state).choice(len(p), p=p))
    return state.layer_ids[i]


@dataclass
class BanditTrace:
    """Per-step rows: step, selected layer, reward, Q vector, p vector."""

    layer_ids: tuple[int, ...]
    rows: list[tuple[int, int, float, tuple[float, ...], tuple[float, ...]]] = field(default_factory=list)

    def record(self, step: int, layer: int, reward: float, state: SchedulerState, p: np.ndarray) -> None:
        self.rows.append((step, layer, reward, tuple(state.q), tuple(float(x) for x in p)))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["step", "selected_layer", "reward"]
                + [f"q_{l}" for l in self.layer_ids]
                + [f"p_{l}" for l in self.layer_ids]
            )
            for step, layer, reward, q, p in self.rows:
                w.writerow([step, layer, repr(reward)] + [repr(x) for x in q] + [repr(x) for x in p])
